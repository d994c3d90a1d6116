//! Radiometric transforms shared by the simulator, the network, the loss,
//! and the metrics: gamma linearization, mu-law range compression, global
//! luminance alignment, and assembly of the network's input planes.

use serde::{Deserialize, Serialize};

use crate::capture::FusionGroup;
use crate::scalar::Scalar;
use crate::tensor::Array;

#[derive(Debug, thiserror::Error)]
pub enum RadiometryError {
    #[error("non-finite pixel value")]
    NonFinite,
    #[error("{0}")]
    OutOfRange(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Dense 3-channel image, stored channel-major so planes map directly onto
/// tensor rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub const CHANNELS: usize = 3;

impl<T: Scalar> ImageBuf<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageBuf { height, width, data: vec![T::zero(); CHANNELS * height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<T>) -> Result<Self, RadiometryError> {
        if height == 0 || width == 0 {
            return Err(RadiometryError::OutOfRange("empty image".into()));
        }
        if data.len() != CHANNELS * height * width {
            return Err(RadiometryError::OutOfRange(format!(
                "expected {} values for {height}x{width}, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(ImageBuf { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut buf = ImageBuf::zeros(height, width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    buf.data[(c * height + y) * width + x] = v;
                }
            }
        }
        buf
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Mean over all pixels and channels jointly.
    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|v| v.as_f64()).sum();
        sum / self.data.len() as f64
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        ImageBuf {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_indexed(&self, mut f: impl FnMut(usize, usize, usize, T) -> T) -> Self {
        ImageBuf::from_fn(self.height, self.width, |c, y, x| f(c, y, x, self.get(c, y, x)))
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_array(&self) -> Array<T> {
        Array::from_vec(vec![CHANNELS, self.height, self.width], self.data.clone())
    }

    pub fn from_array(a: &Array<T>) -> Result<Self, RadiometryError> {
        let (c, h, w) = a.dims3();
        if c != CHANNELS {
            return Err(RadiometryError::OutOfRange(format!("expected 3 channels, got {c}")));
        }
        ImageBuf::from_data(h, w, a.data().to_vec())
    }

    pub fn convert<U: Scalar>(&self) -> ImageBuf<U> {
        ImageBuf {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }
}

/// Display-referred image with values in [0, 1]. `bit_depth` records the
/// quantization grid it was produced on; `None` means continuous values
/// (alignment maps, tonemapped outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct LdrImage<T> {
    buf: ImageBuf<T>,
    bit_depth: Option<u8>,
}

impl<T: Scalar> LdrImage<T> {
    pub fn new(buf: ImageBuf<T>, bit_depth: Option<u8>) -> Result<Self, RadiometryError> {
        if !buf.is_all_finite() {
            return Err(RadiometryError::NonFinite);
        }
        if buf.data().iter().any(|v| *v < T::zero() || *v > T::one()) {
            return Err(RadiometryError::OutOfRange("LDR values must lie in [0, 1]".into()));
        }
        if let Some(d) = bit_depth {
            if !(1..=16).contains(&d) {
                return Err(RadiometryError::InvalidParam(format!("bit depth {d} outside 1..=16")));
            }
        }
        Ok(LdrImage { buf, bit_depth })
    }

    pub fn buf(&self) -> &ImageBuf<T> {
        &self.buf
    }

    pub fn bit_depth(&self) -> Option<u8> {
        self.bit_depth
    }

    pub fn height(&self) -> usize {
        self.buf.height()
    }

    pub fn width(&self) -> usize {
        self.buf.width()
    }

    pub fn convert<U: Scalar>(&self) -> LdrImage<U> {
        LdrImage { buf: self.buf.convert(), bit_depth: self.bit_depth }
    }
}

/// Linear scene radiance, nonnegative and finite, on a relative scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage<T> {
    buf: ImageBuf<T>,
}

impl<T: Scalar> HdrImage<T> {
    pub fn new(buf: ImageBuf<T>) -> Result<Self, RadiometryError> {
        if !buf.is_all_finite() {
            return Err(RadiometryError::NonFinite);
        }
        if buf.data().iter().any(|v| *v < T::zero()) {
            return Err(RadiometryError::OutOfRange("radiance must be nonnegative".into()));
        }
        Ok(HdrImage { buf })
    }

    /// Rescales radiance, e.g. dividing by a white point to reach the
    /// normalized [0, 1] range the loss and metrics operate on.
    pub fn scale(&self, factor: f64) -> Result<Self, RadiometryError> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(RadiometryError::InvalidParam(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        HdrImage::new(self.buf.map(|v| T::cast(v.as_f64() * factor)))
    }

    pub fn buf(&self) -> &ImageBuf<T> {
        &self.buf
    }

    pub fn height(&self) -> usize {
        self.buf.height()
    }

    pub fn width(&self) -> usize {
        self.buf.width()
    }

    pub fn convert<U: Scalar>(&self) -> HdrImage<U> {
        HdrImage { buf: self.buf.convert() }
    }
}

/// Exposure bookkeeping for one captured frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureMeta {
    pub exposure_time_s: f64,
    /// Stops relative to the mid exposure.
    pub ev: i32,
    pub gamma: f64,
}

impl ExposureMeta {
    pub fn new(exposure_time_s: f64, ev: i32, gamma: f64) -> Result<Self, RadiometryError> {
        let meta = ExposureMeta { exposure_time_s, ev, gamma };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<(), RadiometryError> {
        if !(self.exposure_time_s.is_finite() && self.exposure_time_s > 0.0) {
            return Err(RadiometryError::InvalidParam(format!(
                "exposure time must be positive, got {}",
                self.exposure_time_s
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 1.0) {
            return Err(RadiometryError::InvalidParam(format!(
                "gamma must exceed 1, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Inverts the display encoding: H = L^gamma / t, elementwise.
pub fn gamma_to_linear<T: Scalar>(
    l: &LdrImage<T>,
    meta: &ExposureMeta,
) -> Result<HdrImage<T>, RadiometryError> {
    let gamma = meta.gamma;
    let inv_t = 1.0 / meta.exposure_time_s;
    let buf = l.buf().map(|v| T::cast(v.as_f64().powf(gamma) * inv_t));
    HdrImage::new(buf)
}

/// Scalar mu-law range compressor on [0, 1].
pub fn mu_law(x: f64, mu: f64) -> f64 {
    (1.0 + mu * x).ln() / (1.0 + mu).ln()
}

/// Exact inverse of [`mu_law`]: maps compressed values back to radiance.
pub fn mu_expand(y: f64, mu: f64) -> f64 {
    ((y * (1.0 + mu).ln()).exp() - 1.0) / mu
}

/// Compresses normalized radiance into [0, 1]: tau(H) = ln(1+mu*H)/ln(1+mu).
/// Values are clamped to [0, 1] before mapping.
pub fn mu_tonemap<T: Scalar>(h: &HdrImage<T>, mu: f64) -> Result<LdrImage<T>, RadiometryError> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(RadiometryError::InvalidParam(format!("mu must be positive, got {mu}")));
    }
    let buf = h.buf().map(|v| {
        let x = v.as_f64().clamp(0.0, 1.0);
        T::cast(mu_law(x, mu))
    });
    LdrImage::new(buf, None)
}

/// Which orientation of the mean-ratio alignment to use. `AsWritten` follows
/// the published formula; `Inverted` uses the reciprocal ratio, which maps
/// the non-reference frame onto the reference's luminance range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlaVariant {
    #[default]
    AsWritten,
    Inverted,
}

/// Mean-ratio global luminance alignment, clamped to [0, 1] after the
/// product. Means are taken over all pixels and channels of the unclipped
/// inputs.
pub fn global_luminance_align<T: Scalar>(
    l_i: &LdrImage<T>,
    l_m: &LdrImage<T>,
    variant: GlaVariant,
) -> Result<LdrImage<T>, RadiometryError> {
    if !l_i.buf().same_size(l_m.buf()) {
        return Err(RadiometryError::SizeMismatch(
            l_i.height(),
            l_i.width(),
            l_m.height(),
            l_m.width(),
        ));
    }
    let mean_i = l_i.buf().mean();
    let mean_m = l_m.buf().mean();
    let ratio = match variant {
        GlaVariant::AsWritten => {
            if mean_m <= 0.0 {
                return Err(RadiometryError::DegenerateInput(
                    "reference mean luminance is zero".into(),
                ));
            }
            mean_i / mean_m
        }
        GlaVariant::Inverted => {
            if mean_i <= 0.0 {
                return Err(RadiometryError::DegenerateInput(
                    "non-reference mean luminance is zero".into(),
                ));
            }
            if mean_m <= 0.0 {
                return Err(RadiometryError::DegenerateInput(
                    "reference mean luminance is zero".into(),
                ));
            }
            mean_m / mean_i
        }
    };
    let buf = l_i.buf().map(|v| T::cast((v.as_f64() * ratio).clamp(0.0, 1.0)));
    LdrImage::new(buf, None)
}

/// Signed exposure descriptor: e = log2(t_i / t_m) * c.
pub fn relative_exposure(t_i: f64, t_m: f64, c: f64) -> Result<f64, RadiometryError> {
    if !(t_i.is_finite() && t_i > 0.0 && t_m.is_finite() && t_m > 0.0) {
        return Err(RadiometryError::InvalidParam(format!(
            "exposure times must be positive, got {t_i} and {t_m}"
        )));
    }
    Ok((t_i / t_m).log2() * c)
}

/// The network's input: one 9-channel plane stack per exposure branch, in
/// low/mid/high order, plus the two relative-exposure scalars. Channels per
/// branch are ordered [L, H, G] with 3 planes each; the mid branch's G planes
/// are its own L planes.
#[derive(Debug, Clone)]
pub struct NetworkInputStack<T: Scalar> {
    pub branches: [Array<T>; 3],
    pub e_low: f64,
    pub e_high: f64,
}

pub const BRANCH_CHANNELS: usize = 3 * CHANNELS;

/// Assembles the stack from a fusion group. Linearized planes are divided by
/// `white_point` so they share the normalized radiance scale the loss and
/// metrics use; `c` scales the exposure descriptors. With `alignment` set to
/// `None`, the aligned planes degrade to each frame's own values, which keeps
/// the channel layout identical when luminance alignment is switched off.
pub fn build_input_stack<T: Scalar>(
    group: &FusionGroup<T>,
    alignment: Option<GlaVariant>,
    white_point: f64,
    c: f64,
) -> Result<NetworkInputStack<T>, RadiometryError> {
    if !(white_point.is_finite() && white_point > 0.0) {
        return Err(RadiometryError::InvalidParam(format!(
            "white point must be positive, got {white_point}"
        )));
    }
    let reference = &group.reference;
    let t_m = reference.meta.exposure_time_s;
    let mut branches = Vec::with_capacity(3);
    for frame in [&group.low, reference, &group.high] {
        if !frame.image.buf().same_size(reference.image.buf()) {
            return Err(RadiometryError::SizeMismatch(
                frame.image.height(),
                frame.image.width(),
                reference.image.height(),
                reference.image.width(),
            ));
        }
        let l = &frame.image;
        let linear = gamma_to_linear(l, &frame.meta)?;
        let inv_wp = 1.0 / white_point;
        let h_norm = linear.buf().map(|v| T::cast(v.as_f64() * inv_wp));
        let g = match alignment {
            Some(variant) if !std::ptr::eq(frame, reference) => {
                global_luminance_align(l, &reference.image, variant)?
            }
            _ => l.clone(),
        };
        let (hh, ww) = (l.height(), l.width());
        let mut data = Vec::with_capacity(BRANCH_CHANNELS * hh * ww);
        data.extend_from_slice(l.buf().data());
        data.extend_from_slice(h_norm.data());
        data.extend_from_slice(g.buf().data());
        branches.push(Array::from_vec(vec![BRANCH_CHANNELS, hh, ww], data));
    }
    let e_low = relative_exposure(group.low.meta.exposure_time_s, t_m, c)?;
    let e_high = relative_exposure(group.high.meta.exposure_time_s, t_m, c)?;
    let mut it = branches.into_iter();
    Ok(NetworkInputStack {
        branches: [
            it.next().expect("three branches"),
            it.next().expect("three branches"),
            it.next().expect("three branches"),
        ],
        e_low,
        e_high,
    })
}
