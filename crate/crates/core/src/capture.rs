//! Exposure capture simulation: renders scenes through a camera model
//! (exposure, gamma, noise, quantization) under alternating-exposure or
//! dual-camera schedules, and assembles frames into fusion groups.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::radiometry::{ExposureMeta, HdrImage, LdrImage, RadiometryError};
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::seed::derive_rng;

#[derive(Debug, thiserror::Error)]
pub enum CaptureError {
    #[error(transparent)]
    Radiometry(#[from] RadiometryError),
    #[error("invalid capture schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid frame stream: {0}")]
    InvalidStream(String),
    #[error("invalid fusion group: {0}")]
    InvalidGroup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraId {
    Primary,
    Secondary,
}

impl CameraId {
    pub fn label(self) -> &'static str {
        match self {
            CameraId::Primary => "primary",
            CameraId::Secondary => "secondary",
        }
    }
}

/// Which stream a schedule produces.
///
/// `Ae` models a single camera cycling through its EV list. `DcsPrimary`
/// holds the reference camera at EV 0; `DcsSecondary` alternates the
/// non-zero EVs of the cycle on the second camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptureMode {
    Ae,
    DcsPrimary,
    DcsSecondary,
}

impl CaptureMode {
    pub fn camera(self) -> CameraId {
        match self {
            CaptureMode::Ae | CaptureMode::DcsPrimary => CameraId::Primary,
            CaptureMode::DcsSecondary => CameraId::Secondary,
        }
    }
}

fn default_gamma() -> f64 {
    2.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSchedule {
    pub mode: CaptureMode,
    /// EV offsets the stream cycles through, e.g. [-2, 0, 2].
    pub ev_cycle: Vec<i32>,
    /// Exposure time at EV 0, seconds.
    pub base_exposure_s: f64,
    pub frame_rate_hz: f64,
    pub duration_s: f64,
    /// Shifts every timestamp; models the secondary camera firing
    /// between reference frames.
    #[serde(default)]
    pub start_offset_s: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl CaptureSchedule {
    pub fn validate(&self) -> Result<(), CaptureError> {
        let pos = |what: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(CaptureError::InvalidSchedule(format!("{what} must be positive, got {v}")))
            }
        };
        pos("base exposure", self.base_exposure_s)?;
        pos("frame rate", self.frame_rate_hz)?;
        pos("duration", self.duration_s)?;
        pos("gamma", self.gamma)?;
        if !(self.start_offset_s.is_finite() && self.start_offset_s >= 0.0) {
            return Err(CaptureError::InvalidSchedule(format!(
                "start offset must be nonnegative, got {}",
                self.start_offset_s
            )));
        }
        match self.mode {
            CaptureMode::Ae => {
                if self.ev_cycle.is_empty() {
                    return Err(CaptureError::InvalidSchedule(
                        "alternating-exposure cycle is empty".into(),
                    ));
                }
            }
            CaptureMode::DcsPrimary => {}
            CaptureMode::DcsSecondary => {
                if !self.ev_cycle.iter().any(|&ev| ev != 0) {
                    return Err(CaptureError::InvalidSchedule(
                        "secondary stream needs at least one non-zero EV".into(),
                    ));
                }
            }
        }
        if self.frame_count() == 0 {
            return Err(CaptureError::InvalidSchedule(
                "schedule produces no frames; extend duration or raise frame rate".into(),
            ));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.frame_rate_hz).round() as usize
    }

    /// EV offset of the k-th frame under this schedule's mode.
    pub fn ev_for(&self, k: usize) -> i32 {
        match self.mode {
            CaptureMode::Ae => self.ev_cycle[k % self.ev_cycle.len()],
            CaptureMode::DcsPrimary => 0,
            CaptureMode::DcsSecondary => {
                let nz: Vec<i32> = self.ev_cycle.iter().copied().filter(|&e| e != 0).collect();
                nz[k % nz.len()]
            }
        }
    }

    pub fn exposure_time(&self, ev: i32) -> f64 {
        self.base_exposure_s * 2f64.powi(ev)
    }
}

/// Additive Gaussian noise in the gamma-encoded domain, with optional
/// per-EV overrides of the default standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    #[serde(default)]
    pub per_ev: BTreeMap<i32, f64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { sigma: 0.0, per_ev: BTreeMap::new() }
    }
}

impl NoiseModel {
    pub fn constant(sigma: f64) -> Self {
        NoiseModel { sigma, per_ev: BTreeMap::new() }
    }

    pub fn sigma_for(&self, ev: i32) -> f64 {
        self.per_ev.get(&ev).copied().unwrap_or(self.sigma)
    }

    pub fn validate(&self) -> Result<(), CaptureError> {
        for &s in std::iter::once(&self.sigma).chain(self.per_ev.values()) {
            if !(s.is_finite() && s >= 0.0) {
                return Err(CaptureError::InvalidSchedule(format!(
                    "noise sigma must be nonnegative, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// One captured frame: quantized gamma-encoded pixels plus capture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrFrame<T: Scalar> {
    pub image: LdrImage<T>,
    pub meta: ExposureMeta,
    pub timestamp_us: u64,
    pub camera: CameraId,
    pub frame_index: usize,
}

impl<T: Scalar> LdrFrame<T> {
    pub fn ev(&self) -> i32 {
        self.meta.ev
    }

    pub fn timestamp_s(&self) -> f64 {
        self.timestamp_us as f64 * 1e-6
    }
}

/// Snap to the uniform code grid of a `d`-bit sensor.
fn quantize<T: Scalar>(v: T, bit_depth: u8) -> T {
    let levels = ((1u32 << bit_depth) - 1) as f64;
    T::cast((v.as_f64() * levels).round() / levels)
}

/// Camera response: scale radiance by exposure time, gamma-encode, add
/// Gaussian read noise, clip to [0, 1], then quantize if a bit depth is
/// given (`None` keeps the continuous value, useful for round-trip checks).
pub fn expose<T: Scalar>(
    radiance: &HdrImage<T>,
    meta: &ExposureMeta,
    sigma: f64,
    bit_depth: Option<u8>,
    rng: &mut ChaCha8Rng,
) -> Result<LdrImage<T>, CaptureError> {
    meta.validate()?;
    if let Some(d) = bit_depth {
        if !(8..=16).contains(&d) {
            return Err(CaptureError::InvalidSchedule(format!(
                "sensor bit depth must lie in 8..=16, got {d}"
            )));
        }
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(CaptureError::InvalidSchedule(format!(
            "noise sigma must be nonnegative, got {sigma}"
        )));
    }
    let noise = Normal::new(0.0f64, sigma)
        .map_err(|e| CaptureError::InvalidSchedule(format!("noise sigma {sigma}: {e}")))?;
    let inv_gamma = 1.0 / meta.gamma;
    let buf = radiance.buf().map(|v| {
        let exposed = (v.as_f64() * meta.exposure_time_s).powf(inv_gamma);
        let noisy = (exposed + noise.sample(rng)).clamp(0.0, 1.0);
        let pixel = T::cast(noisy);
        match bit_depth {
            Some(d) => quantize(pixel, d),
            None => pixel,
        }
    });
    Ok(LdrImage::new(buf, bit_depth)?)
}

/// Runs a full capture schedule over a scene. Noise is drawn from a stream
/// derived per frame from the master seed, so any frame's pixels are
/// independent of how many frames precede it.
pub fn run_schedule<T: Scalar>(
    scene: &Scene,
    schedule: &CaptureSchedule,
    noise: &NoiseModel,
    bit_depth: Option<u8>,
    master_seed: u64,
) -> Result<Vec<LdrFrame<T>>, CaptureError> {
    schedule.validate()?;
    noise.validate()?;
    scene
        .validate()
        .map_err(|e| CaptureError::InvalidSchedule(e.to_string()))?;
    let camera = schedule.mode.camera();
    let mut frames = Vec::with_capacity(schedule.frame_count());
    for k in 0..schedule.frame_count() {
        let ev = schedule.ev_for(k);
        let t_s = schedule.start_offset_s + k as f64 / schedule.frame_rate_hz;
        let meta = ExposureMeta::new(schedule.exposure_time(ev), ev, schedule.gamma)?;
        let radiance = scene.render::<T>(t_s);
        let mut rng = derive_rng(master_seed, &format!("noise/{}/{k}", camera.label()));
        let image = expose(&radiance, &meta, noise.sigma_for(ev), bit_depth, &mut rng)?;
        frames.push(LdrFrame {
            image,
            meta,
            timestamp_us: (t_s * 1e6).round() as u64,
            camera,
            frame_index: k,
        });
    }
    Ok(frames)
}

/// Horizontal shift with edge replication, modeling the fixed baseline
/// between the two cameras. Positive disparity moves content rightward;
/// fractional shifts interpolate linearly (and drop the quantization tag,
/// since interpolated values leave the code grid).
pub fn apply_parallax<T: Scalar>(frame: &LdrFrame<T>, disparity_px: f64) -> LdrFrame<T> {
    assert!(disparity_px.is_finite(), "disparity must be finite");
    let w = frame.image.buf().width();
    let buf = frame.image.buf().map_indexed(|c, y, x, _| {
        let src = x as f64 - disparity_px;
        let x0 = src.floor();
        let frac = src - x0;
        let clamp = |xi: f64| (xi.max(0.0) as usize).min(w - 1);
        let a = frame.image.buf().get(c, y, clamp(x0));
        let b = frame.image.buf().get(c, y, clamp(x0 + 1.0));
        T::cast(a.as_f64() * (1.0 - frac) + b.as_f64() * frac)
    });
    let bit_depth = if disparity_px.fract() == 0.0 { frame.image.bit_depth() } else { None };
    LdrFrame {
        image: LdrImage::new(buf, bit_depth).expect("interpolation of valid pixels stays in range"),
        meta: frame.meta.clone(),
        timestamp_us: frame.timestamp_us,
        camera: frame.camera,
        frame_index: frame.frame_index,
    }
}

/// A reference frame bracketed by one low and one high exposure, plus the
/// scene radiance at the reference instant when the simulator knows it.
#[derive(Debug, Clone)]
pub struct FusionGroup<T: Scalar> {
    pub reference: LdrFrame<T>,
    pub low: LdrFrame<T>,
    pub high: LdrFrame<T>,
    pub ground_truth: Option<HdrImage<T>>,
}

impl<T: Scalar> FusionGroup<T> {
    pub fn new(
        reference: LdrFrame<T>,
        low: LdrFrame<T>,
        high: LdrFrame<T>,
    ) -> Result<Self, CaptureError> {
        if !(low.ev() < reference.ev() && reference.ev() < high.ev()) {
            return Err(CaptureError::InvalidGroup(format!(
                "EV ordering violated: low {} / reference {} / high {}",
                low.ev(),
                reference.ev(),
                high.ev()
            )));
        }
        let same = |a: &LdrFrame<T>, b: &LdrFrame<T>| {
            a.image.buf().height() == b.image.buf().height()
                && a.image.buf().width() == b.image.buf().width()
        };
        if !same(&reference, &low) || !same(&reference, &high) {
            return Err(CaptureError::InvalidGroup("frame sizes differ within group".into()));
        }
        Ok(FusionGroup { reference, low, high, ground_truth: None })
    }

    pub fn with_ground_truth(mut self, gt: HdrImage<T>) -> Result<Self, CaptureError> {
        let buf = self.reference.image.buf();
        if gt.buf().height() != buf.height() || gt.buf().width() != buf.width() {
            return Err(CaptureError::InvalidGroup("ground truth size differs from frames".into()));
        }
        self.ground_truth = Some(gt);
        Ok(self)
    }
}

/// Midpoint timestamp of a low/high pair, in microseconds.
fn pair_midpoint<T: Scalar>(a: &LdrFrame<T>, b: &LdrFrame<T>) -> u64 {
    ((a.timestamp_us as u128 + b.timestamp_us as u128) / 2) as u64
}

/// Pairs the secondary stream two-by-two in capture order and attaches
/// every reference frame to the pair whose midpoint lies nearest to it
/// (ties resolve to the most recent pair). Dual-camera grouping: several
/// references may share one pair, and every reference lands in exactly
/// one group.
pub fn group_frames<T: Scalar>(
    references: &[LdrFrame<T>],
    secondary: &[LdrFrame<T>],
) -> Result<Vec<FusionGroup<T>>, CaptureError> {
    if references.is_empty() {
        return Err(CaptureError::InvalidStream("no reference frames".into()));
    }
    for r in references {
        if r.ev() != 0 {
            return Err(CaptureError::InvalidStream(format!(
                "reference stream contains EV {} at frame {}",
                r.ev(),
                r.frame_index
            )));
        }
    }
    let mut pairs: Vec<(LdrFrame<T>, LdrFrame<T>, u64)> = Vec::new();
    for chunk in secondary.chunks_exact(2) {
        let (a, b) = (&chunk[0], &chunk[1]);
        let (low, high) = if a.ev() < b.ev() {
            (a.clone(), b.clone())
        } else if b.ev() < a.ev() {
            (b.clone(), a.clone())
        } else {
            return Err(CaptureError::InvalidStream(format!(
                "consecutive secondary frames {} and {} share EV {}",
                a.frame_index,
                b.frame_index,
                a.ev()
            )));
        };
        let mid = pair_midpoint(&low, &high);
        pairs.push((low, high, mid));
    }
    if pairs.is_empty() {
        return Err(CaptureError::InvalidStream(
            "secondary stream holds no complete low/high pair".into(),
        ));
    }
    references
        .iter()
        .map(|r| {
            let (low, high, _) = pairs
                .iter()
                .min_by(|x, y| {
                    let dx = r.timestamp_us.abs_diff(x.2);
                    let dy = r.timestamp_us.abs_diff(y.2);
                    // On equal distance prefer the later pair, so a
                    // reference between two pairs takes the fresher one.
                    dx.cmp(&dy).then(y.2.cmp(&x.2))
                })
                .expect("pair list verified nonempty");
            FusionGroup::new(r.clone(), low.clone(), high.clone())
        })
        .collect()
}

/// Single-camera grouping: each EV 0 frame takes the nearest preceding low
/// exposure and the nearest following high exposure, falling back to the
/// other direction at stream edges.
pub fn ae_group_frames<T: Scalar>(stream: &[LdrFrame<T>]) -> Result<Vec<FusionGroup<T>>, CaptureError> {
    let refs: Vec<usize> =
        (0..stream.len()).filter(|&i| stream[i].ev() == 0).collect();
    if refs.is_empty() {
        return Err(CaptureError::InvalidStream(
            "alternating stream holds no EV 0 frame".into(),
        ));
    }
    let pick = |i: usize, want_low: bool, prefer_before: bool| -> Option<usize> {
        let matches = |j: &&usize| {
            let ev = stream[**j].ev();
            if want_low {
                ev < 0
            } else {
                ev > 0
            }
        };
        let before: Vec<usize> = (0..i).collect();
        let after: Vec<usize> = (i + 1..stream.len()).collect();
        if prefer_before {
            before.iter().rev().find(matches).or_else(|| after.iter().find(matches)).copied()
        } else {
            after.iter().find(matches).or_else(|| before.iter().rev().find(matches)).copied()
        }
    };
    refs.iter()
        .map(|&i| {
            let low = pick(i, true, true).ok_or_else(|| {
                CaptureError::InvalidStream("no low exposure in alternating stream".into())
            })?;
            let high = pick(i, false, false).ok_or_else(|| {
                CaptureError::InvalidStream("no high exposure in alternating stream".into())
            })?;
            FusionGroup::new(stream[i].clone(), stream[low].clone(), stream[high].clone())
        })
        .collect()
}
