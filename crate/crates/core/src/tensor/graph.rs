//! The autodiff tape.

use std::cell::RefCell;

use super::array::Array;
use super::ops;
use super::TensorError;
use crate::scalar::Scalar;

/// Handle to a node on one [`Graph`]'s tape. Ids are only meaningful for the
/// graph that issued them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Backward recipe for one node: which parents it reads and any hyperparameters
/// its vector-Jacobian product needs. Values live on the tape, so recipes only
/// store ids.
enum BackOp<T> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, T),
    Relu(TensorId),
    Sigmoid(TensorId),
    Abs(TensorId),
    Clamp01(TensorId),
    MuLaw { x: TensorId, mu: f64 },
    SumAll(TensorId),
    MeanAll(TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    SoftmaxRows(TensorId),
    MatVec { w: TensorId, x: TensorId, b: Option<TensorId> },
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, stride: usize, dilation: usize },
    Gap(TensorId),
    ScaleChannels { x: TensorId, v: TensorId },
    Concat0(Vec<TensorId>),
    SliceChannels { x: TensorId, start: usize },
    Unfold { x: TensorId, patch: usize, stride: usize },
    Fold { tokens: TensorId, patch: usize, stride: usize, normalized: bool },
    PixelShuffle { x: TensorId, factor: usize },
    BilinearUp { x: TensorId, factor: usize },
    HaarBand { x: TensorId, band: usize },
    HaarIwt([TensorId; 4]),
    Crop2d(TensorId),
}

struct Node<T> {
    value: Array<T>,
    op: BackOp<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`TensorId`].
pub struct Gradients<T> {
    slots: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to the given tensor, if it was
    /// reachable and marked differentiable.
    pub fn get(&self, id: TensorId) -> Option<&Array<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Array<T>> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

/// Append-only reverse-mode tape. Operations evaluate eagerly, validate their
/// input shapes, and reject non-finite outputs. Interior mutability keeps the
/// builder API usable through shared references.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

type Result<V> = std::result::Result<V, TensorError>;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant leaf: participates in forward math but receives no gradient.
    pub fn input(&self, value: Array<T>) -> Result<TensorId> {
        self.push("input", value, BackOp::Leaf, false)
    }

    /// Differentiable leaf, used for parameters and for finite-difference
    /// probes of network inputs.
    pub fn param(&self, value: Array<T>) -> Result<TensorId> {
        self.push("param", value, BackOp::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> Array<T> {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: TensorId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    fn check_id(&self, op: &'static str, id: TensorId) -> Result<()> {
        if id.0 >= self.len() {
            return Err(TensorError::UnknownTensor { op, id: id.0 });
        }
        Ok(())
    }

    fn push(&self, op_name: &'static str, value: Array<T>, op: BackOp<T>, needs_grad: bool) -> Result<TensorId> {
        if !value.is_all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Ok(TensorId(nodes.len() - 1))
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes.borrow()[id.0].needs_grad
    }

    /// Runs `f` on the borrowed values of the given ids.
    fn with_values<R>(&self, ids: &[TensorId], f: impl FnOnce(&[&Array<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Array<T>> = ids.iter().map(|id| &nodes[id.0].value).collect();
        f(&vals)
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Array<T>, bool)> {
        self.check_id(op, a)?;
        self.check_id(op, b)?;
        let value = self.with_values(&[a, b], |v| {
            if v[0].shape() != v[1].shape() {
                return Err(TensorError::ShapeMismatch {
                    op,
                    expected: format!("{:?}", v[0].shape()),
                    got: format!("{:?}", v[1].shape()),
                });
            }
            Ok(v[0].zip_map(v[1], &f))
        })?;
        Ok((value, self.needs(a) || self.needs(b)))
    }

    pub fn add(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (value, ng) = self.binary_same_shape("add", a, b, |x, y| x + y)?;
        self.push("add", value, BackOp::Add(a, b), ng)
    }

    pub fn sub(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (value, ng) = self.binary_same_shape("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, BackOp::Sub(a, b), ng)
    }

    pub fn mul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (value, ng) = self.binary_same_shape("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, BackOp::Mul(a, b), ng)
    }

    pub fn scale(&self, a: TensorId, k: T) -> Result<TensorId> {
        self.check_id("scale", a)?;
        let value = self.with_values(&[a], |v| v[0].map(|x| x * k));
        self.push("scale", value, BackOp::Scale(a, k), self.needs(a))
    }

    pub fn relu(&self, a: TensorId) -> Result<TensorId> {
        self.check_id("relu", a)?;
        let value = self.with_values(&[a], |v| v[0].map(|x| x.max(T::zero())));
        self.push("relu", value, BackOp::Relu(a), self.needs(a))
    }

    pub fn sigmoid(&self, a: TensorId) -> Result<TensorId> {
        self.check_id("sigmoid", a)?;
        let value = self.with_values(&[a], |v| {
            v[0].map(|x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            })
        });
        self.push("sigmoid", value, BackOp::Sigmoid(a), self.needs(a))
    }

    pub fn abs(&self, a: TensorId) -> Result<TensorId> {
        self.check_id("abs", a)?;
        let value = self.with_values(&[a], |v| v[0].map(|x| x.abs()));
        self.push("abs", value, BackOp::Abs(a), self.needs(a))
    }

    pub fn clamp01(&self, a: TensorId) -> Result<TensorId> {
        self.check_id("clamp01", a)?;
        let value = self.with_values(&[a], |v| v[0].map(|x| x.max(T::zero()).min(T::one())));
        self.push("clamp01", value, BackOp::Clamp01(a), self.needs(a))
    }

    /// Range compressor ln(1 + mu*x) / ln(1 + mu), defined on [0, 1].
    pub fn mu_law(&self, a: TensorId, mu: f64) -> Result<TensorId> {
        self.check_id("mu_law", a)?;
        if mu <= 0.0 {
            return Err(TensorError::Invalid {
                op: "mu_law",
                why: format!("mu must be positive, got {mu}"),
            });
        }
        let denom = (1.0 + mu).ln();
        let value = self.with_values(&[a], |v| {
            v[0].map(|x| T::cast((1.0 + mu * x.as_f64()).ln() / denom))
        });
        self.push("mu_law", value, BackOp::MuLaw { x: a, mu }, self.needs(a))
    }

    pub fn sum_all(&self, a: TensorId) -> Result<TensorId> {
        self.check_id("sum_all", a)?;
        let value = self.with_values(&[a], |v| Array::scalar(v[0].data().iter().copied().sum()));
        self.push("sum_all", value, BackOp::SumAll(a), self.needs(a))
    }

    pub fn mean_all(&self, a: TensorId) -> Result<TensorId> {
        self.check_id("mean_all", a)?;
        let value = self.with_values(&[a], |v| {
            let n = T::cast(v[0].numel() as f64);
            Array::scalar(v[0].data().iter().copied().sum::<T>() / n)
        });
        self.push("mean_all", value, BackOp::MeanAll(a), self.needs(a))
    }

    /// Mean absolute difference, the workhorse reconstruction loss.
    pub fn l1_loss(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean_all(d)
    }

    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id("matmul", a)?;
        self.check_id("matmul", b)?;
        let value = self.with_values(&[a, b], |v| {
            let (_, k) = v[0].dims2();
            let (k2, _) = v[1].dims2();
            if k != k2 {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    expected: format!("inner dim {k}"),
                    got: format!("inner dim {k2}"),
                });
            }
            Ok(ops::matmul_fwd(v[0], v[1]))
        })?;
        self.push("matmul", value, BackOp::Matmul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn transpose(&self, a: TensorId) -> Result<TensorId> {
        self.check_id("transpose", a)?;
        let value = self.with_values(&[a], |v| {
            if v[0].rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "transpose",
                    expected: "rank 2".into(),
                    got: format!("{:?}", v[0].shape()),
                });
            }
            Ok(ops::transpose2(v[0]))
        })?;
        self.push("transpose", value, BackOp::Transpose(a), self.needs(a))
    }

    pub fn softmax_rows(&self, a: TensorId) -> Result<TensorId> {
        self.check_id("softmax_rows", a)?;
        let value = self.with_values(&[a], |v| {
            if v[0].rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    expected: "rank 2".into(),
                    got: format!("{:?}", v[0].shape()),
                });
            }
            Ok(ops::softmax_rows_fwd(v[0]))
        })?;
        self.push("softmax_rows", value, BackOp::SoftmaxRows(a), self.needs(a))
    }

    /// Affine map on a vector: w of shape (m, n) applied to x of shape (n).
    pub fn fully_connected(&self, w: TensorId, x: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        self.check_id("fully_connected", w)?;
        self.check_id("fully_connected", x)?;
        if let Some(b) = b {
            self.check_id("fully_connected", b)?;
        }
        let mut ids = vec![w, x];
        if let Some(b) = b {
            ids.push(b);
        }
        let value = self.with_values(&ids, |v| {
            let (m, n) = v[0].dims2();
            if v[1].rank() != 1 || v[1].numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "fully_connected",
                    expected: format!("input ({n})"),
                    got: format!("{:?}", v[1].shape()),
                });
            }
            let bias = v.get(2).copied();
            if let Some(bv) = bias {
                if bv.rank() != 1 || bv.numel() != m {
                    return Err(TensorError::ShapeMismatch {
                        op: "fully_connected",
                        expected: format!("bias ({m})"),
                        got: format!("{:?}", bv.shape()),
                    });
                }
            }
            Ok(ops::matvec_fwd(v[0], v[1], bias))
        })?;
        let ng = self.needs(w) || self.needs(x) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push("fully_connected", value, BackOp::MatVec { w, x, b }, ng)
    }

    /// 2D convolution over (C, H, W) with zero "same" padding, odd kernels
    /// only. Dilation widens the receptive field without extra weights.
    pub fn conv2d(
        &self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        dilation: usize,
    ) -> Result<TensorId> {
        self.check_id("conv2d", x)?;
        self.check_id("conv2d", w)?;
        if let Some(b) = b {
            self.check_id("conv2d", b)?;
        }
        if stride == 0 || dilation == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                why: format!("stride and dilation must be nonzero, got stride={stride} dilation={dilation}"),
            });
        }
        let mut ids = vec![x, w];
        if let Some(b) = b {
            ids.push(b);
        }
        let value = self.with_values(&ids, |v| {
            let (ci, _, _) = v[0].dims3();
            let (co, ci2, kh, kw) = v[1].dims4();
            if ci != ci2 {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    expected: format!("weight in-channels {ci}"),
                    got: format!("{ci2}"),
                });
            }
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(TensorError::Invalid {
                    op: "conv2d",
                    why: format!("kernel must be odd for symmetric padding, got {kh}x{kw}"),
                });
            }
            if let Some(bv) = v.get(2) {
                if bv.rank() != 1 || bv.numel() != co {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d",
                        expected: format!("bias ({co})"),
                        got: format!("{:?}", bv.shape()),
                    });
                }
            }
            Ok(ops::conv2d_fwd(v[0], v[1], v.get(2).copied(), stride, dilation))
        })?;
        let ng = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push("conv2d", value, BackOp::Conv2d { x, w, b, stride, dilation }, ng)
    }

    /// Per-channel spatial mean: (C, H, W) down to (C).
    pub fn global_avg_pool(&self, x: TensorId) -> Result<TensorId> {
        self.check_id("global_avg_pool", x)?;
        let value = self.with_values(&[x], |v| {
            if v[0].rank() != 3 {
                return Err(TensorError::ShapeMismatch {
                    op: "global_avg_pool",
                    expected: "rank 3".into(),
                    got: format!("{:?}", v[0].shape()),
                });
            }
            Ok(ops::gap_fwd(v[0]))
        })?;
        self.push("global_avg_pool", value, BackOp::Gap(x), self.needs(x))
    }

    /// Channel-wise modulation: every plane of x scaled by its entry of v.
    pub fn scale_channels(&self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.check_id("scale_channels", x)?;
        self.check_id("scale_channels", v)?;
        let value = self.with_values(&[x, v], |vals| {
            let (c, _, _) = vals[0].dims3();
            if vals[1].rank() != 1 || vals[1].numel() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "scale_channels",
                    expected: format!("({c})"),
                    got: format!("{:?}", vals[1].shape()),
                });
            }
            Ok(ops::scale_channels_fwd(vals[0], vals[1]))
        })?;
        self.push(
            "scale_channels",
            value,
            BackOp::ScaleChannels { x, v },
            self.needs(x) || self.needs(v),
        )
    }

    /// Concatenation along axis 0; all trailing dimensions must agree.
    pub fn concat0(&self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat0", why: "no inputs".into() });
        }
        for &p in parts {
            self.check_id("concat0", p)?;
        }
        let value = self.with_values(parts, |v| {
            let tail = &v[0].shape()[1..];
            let mut axis0 = 0;
            for a in v {
                if a.rank() != v[0].rank() || &a.shape()[1..] != tail {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat0",
                        expected: format!("trailing dims {tail:?}"),
                        got: format!("{:?}", a.shape()),
                    });
                }
                axis0 += a.shape()[0];
            }
            let mut shape = v[0].shape().to_vec();
            shape[0] = axis0;
            let mut data = Vec::with_capacity(shape.iter().product());
            for a in v {
                data.extend_from_slice(a.data());
            }
            Ok(Array::from_vec(shape, data))
        })?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat0", value, BackOp::Concat0(parts.to_vec()), ng)
    }

    /// Contiguous channel slice of a (C, H, W) tensor.
    pub fn slice_channels(&self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check_id("slice_channels", x)?;
        let value = self.with_values(&[x], |v| {
            let (c, _, _) = v[0].dims3();
            if start + len > c || len == 0 {
                return Err(TensorError::Invalid {
                    op: "slice_channels",
                    why: format!("slice {start}..{} out of {c} channels", start + len),
                });
            }
            Ok(ops::slice_c_fwd(v[0], start, len))
        })?;
        self.push("slice_channels", value, BackOp::SliceChannels { x, start }, self.needs(x))
    }

    /// Extracts overlapping patches as tokens: (C, H, W) to (N, C*p*p) with
    /// patches scanned row-major.
    pub fn unfold(&self, x: TensorId, patch: usize, stride: usize) -> Result<TensorId> {
        self.check_id("unfold", x)?;
        if patch == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "unfold",
                why: format!("patch and stride must be nonzero, got patch={patch} stride={stride}"),
            });
        }
        let value = self.with_values(&[x], |v| {
            let (_, h, w) = v[0].dims3();
            if h < patch || w < patch {
                return Err(TensorError::Invalid {
                    op: "unfold",
                    why: format!("patch {patch} exceeds input {h}x{w}"),
                });
            }
            Ok(ops::unfold_fwd(v[0], patch, stride))
        })?;
        self.push("unfold", value, BackOp::Unfold { x, patch, stride }, self.needs(x))
    }

    /// Reassembles tokens into (C, H, W), averaging where patches overlap.
    /// Pixels no patch covers are zero.
    pub fn fold(
        &self,
        tokens: TensorId,
        c: usize,
        h: usize,
        w: usize,
        patch: usize,
        stride: usize,
    ) -> Result<TensorId> {
        self.fold_impl(tokens, c, h, w, patch, stride, true)
    }

    /// Plain scatter-add of tokens, the exact adjoint of [`Graph::unfold`].
    pub fn fold_unnormalized(
        &self,
        tokens: TensorId,
        c: usize,
        h: usize,
        w: usize,
        patch: usize,
        stride: usize,
    ) -> Result<TensorId> {
        self.fold_impl(tokens, c, h, w, patch, stride, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn fold_impl(
        &self,
        tokens: TensorId,
        c: usize,
        h: usize,
        w: usize,
        patch: usize,
        stride: usize,
        normalized: bool,
    ) -> Result<TensorId> {
        let op = if normalized { "fold" } else { "fold_unnormalized" };
        self.check_id(op, tokens)?;
        if patch == 0 || stride == 0 || h < patch || w < patch {
            return Err(TensorError::Invalid {
                op,
                why: format!("invalid geometry: {c}x{h}x{w}, patch {patch}, stride {stride}"),
            });
        }
        let nh = (h - patch) / stride + 1;
        let nw = (w - patch) / stride + 1;
        let value = self.with_values(&[tokens], |v| {
            let (n, tok) = v[0].dims2();
            if n != nh * nw || tok != c * patch * patch {
                return Err(TensorError::ShapeMismatch {
                    op,
                    expected: format!("({}, {})", nh * nw, c * patch * patch),
                    got: format!("{:?}", v[0].shape()),
                });
            }
            let mut out = ops::fold_raw(v[0], c, h, w, patch, stride);
            if normalized {
                let counts: Array<T> = ops::fold_counts(h, w, patch, stride);
                let plane = h * w;
                for ch in 0..c {
                    for (o, &k) in out.data_mut()[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .zip(counts.data())
                    {
                        if k > T::zero() {
                            *o /= k;
                        }
                    }
                }
            }
            Ok(out)
        })?;
        self.push(op, value, BackOp::Fold { tokens, patch, stride, normalized }, self.needs(tokens))
    }

    /// Depth-to-space: (C*r*r, H, W) to (C, H*r, W*r).
    pub fn pixel_shuffle_up(&self, x: TensorId, factor: usize) -> Result<TensorId> {
        self.check_id("pixel_shuffle_up", x)?;
        if factor == 0 {
            return Err(TensorError::Invalid { op: "pixel_shuffle_up", why: "factor must be nonzero".into() });
        }
        let value = self.with_values(&[x], |v| {
            let (c, _, _) = v[0].dims3();
            if c % (factor * factor) != 0 {
                return Err(TensorError::Invalid {
                    op: "pixel_shuffle_up",
                    why: format!("channels {c} not divisible by {}", factor * factor),
                });
            }
            Ok(ops::pixel_shuffle_fwd(v[0], factor))
        })?;
        self.push("pixel_shuffle_up", value, BackOp::PixelShuffle { x, factor }, self.needs(x))
    }

    /// Integer-factor bilinear upsampling with corner alignment.
    pub fn bilinear_upsample(&self, x: TensorId, factor: usize) -> Result<TensorId> {
        self.check_id("bilinear_upsample", x)?;
        if factor == 0 {
            return Err(TensorError::Invalid { op: "bilinear_upsample", why: "factor must be nonzero".into() });
        }
        let value = self.with_values(&[x], |v| {
            if v[0].rank() != 3 {
                return Err(TensorError::ShapeMismatch {
                    op: "bilinear_upsample",
                    expected: "rank 3".into(),
                    got: format!("{:?}", v[0].shape()),
                });
            }
            Ok(ops::bilinear_up_fwd(v[0], factor))
        })?;
        self.push("bilinear_upsample", value, BackOp::BilinearUp { x, factor }, self.needs(x))
    }

    /// Single-level orthonormal Haar analysis. Returns [LL, LH, HL, HH], each
    /// (C, H/2, W/2); H and W must be even.
    pub fn haar_dwt(&self, x: TensorId) -> Result<[TensorId; 4]> {
        self.check_id("haar_dwt", x)?;
        let bands = self.with_values(&[x], |v| {
            let (_, h, w) = v[0].dims3();
            if h % 2 != 0 || w % 2 != 0 {
                return Err(TensorError::Invalid {
                    op: "haar_dwt",
                    why: format!("spatial dims must be even, got {h}x{w}"),
                });
            }
            Ok(ops::haar_dwt_fwd(v[0]))
        })?;
        let ng = self.needs(x);
        let mut ids = [TensorId(0); 4];
        for (band, value) in bands.into_iter().enumerate() {
            ids[band] = self.push("haar_dwt", value, BackOp::HaarBand { x, band }, ng)?;
        }
        Ok(ids)
    }

    /// Single-level orthonormal Haar synthesis from [LL, LH, HL, HH].
    pub fn haar_iwt(&self, bands: [TensorId; 4]) -> Result<TensorId> {
        for &b in &bands {
            self.check_id("haar_iwt", b)?;
        }
        let value = self.with_values(&bands, |v| {
            for a in &v[1..] {
                if a.shape() != v[0].shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "haar_iwt",
                        expected: format!("{:?}", v[0].shape()),
                        got: format!("{:?}", a.shape()),
                    });
                }
            }
            Ok(ops::haar_iwt_fwd([v[0], v[1], v[2], v[3]]))
        })?;
        let ng = bands.iter().any(|&b| self.needs(b));
        self.push("haar_iwt", value, BackOp::HaarIwt(bands), ng)
    }

    /// Top-left spatial crop to (C, h, w).
    pub fn crop2d(&self, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        self.check_id("crop2d", x)?;
        let value = self.with_values(&[x], |v| {
            let (_, xh, xw) = v[0].dims3();
            if h > xh || w > xw || h == 0 || w == 0 {
                return Err(TensorError::Invalid {
                    op: "crop2d",
                    why: format!("crop {h}x{w} outside input {xh}x{xw}"),
                });
            }
            Ok(ops::crop2d_fwd(v[0], h, w))
        })?;
        self.push("crop2d", value, BackOp::Crop2d(x), self.needs(x))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// differentiable tensor that the loss depends on.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<T>> {
        self.check_id("backward", loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                numel: nodes[loss.0].value.numel(),
            });
        }
        let mut slots: Vec<Option<Array<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].needs_grad {
            return Ok(Gradients { slots });
        }
        slots[loss.0] = Some(Array::full(nodes[loss.0].value.shape(), T::one()));

        // Accumulate a contribution into a parent's slot, skipping parents
        // outside the differentiable cone.
        let acc = |slots: &mut Vec<Option<Array<T>>>, id: TensorId, contrib: Array<T>| {
            if !nodes[id.0].needs_grad {
                return;
            }
            match &mut slots[id.0] {
                Some(g) => g.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = slots[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                BackOp::Leaf => {
                    // Leaves keep their gradient.
                    slots[idx] = Some(g);
                }
                BackOp::Add(a, b) => {
                    acc(&mut slots, *a, g.clone());
                    acc(&mut slots, *b, g);
                }
                BackOp::Sub(a, b) => {
                    acc(&mut slots, *a, g.clone());
                    acc(&mut slots, *b, g.map(|v| -v));
                }
                BackOp::Mul(a, b) => {
                    acc(&mut slots, *a, g.zip_map(&nodes[b.0].value, |gv, bv| gv * bv));
                    acc(&mut slots, *b, g.zip_map(&nodes[a.0].value, |gv, av| gv * av));
                }
                BackOp::Scale(a, k) => {
                    let k = *k;
                    acc(&mut slots, *a, g.map(|v| v * k));
                }
                BackOp::Relu(a) => {
                    let dx = g.zip_map(&nodes[a.0].value, |gv, xv| {
                        if xv > T::zero() { gv } else { T::zero() }
                    });
                    acc(&mut slots, *a, dx);
                }
                BackOp::Sigmoid(a) => {
                    let dx = g.zip_map(&node.value, |gv, yv| gv * yv * (T::one() - yv));
                    acc(&mut slots, *a, dx);
                }
                BackOp::Abs(a) => {
                    let dx = g.zip_map(&nodes[a.0].value, |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut slots, *a, dx);
                }
                BackOp::Clamp01(a) => {
                    let dx = g.zip_map(&nodes[a.0].value, |gv, xv| {
                        if xv > T::zero() && xv < T::one() { gv } else { T::zero() }
                    });
                    acc(&mut slots, *a, dx);
                }
                BackOp::MuLaw { x, mu } => {
                    let mu = *mu;
                    let denom = (1.0 + mu).ln();
                    let dx = g.zip_map(&nodes[x.0].value, |gv, xv| {
                        gv * T::cast(mu / ((1.0 + mu * xv.as_f64()) * denom))
                    });
                    acc(&mut slots, *x, dx);
                }
                BackOp::SumAll(a) => {
                    let gv = g.first();
                    acc(&mut slots, *a, Array::full(nodes[a.0].value.shape(), gv));
                }
                BackOp::MeanAll(a) => {
                    let n = T::cast(nodes[a.0].value.numel() as f64);
                    let gv = g.first() / n;
                    acc(&mut slots, *a, Array::full(nodes[a.0].value.shape(), gv));
                }
                BackOp::Matmul(a, b) => {
                    if nodes[a.0].needs_grad {
                        let bt = ops::transpose2(&nodes[b.0].value);
                        acc(&mut slots, *a, ops::matmul_fwd(&g, &bt));
                    }
                    if nodes[b.0].needs_grad {
                        let at = ops::transpose2(&nodes[a.0].value);
                        acc(&mut slots, *b, ops::matmul_fwd(&at, &g));
                    }
                }
                BackOp::Transpose(a) => {
                    acc(&mut slots, *a, ops::transpose2(&g));
                }
                BackOp::SoftmaxRows(a) => {
                    acc(&mut slots, *a, ops::softmax_rows_bwd(&g, &node.value));
                }
                BackOp::MatVec { w, x, b } => {
                    if nodes[w.0].needs_grad {
                        acc(&mut slots, *w, ops::matvec_bwd_w(&g, &nodes[x.0].value));
                    }
                    if nodes[x.0].needs_grad {
                        acc(&mut slots, *x, ops::matvec_bwd_x(&g, &nodes[w.0].value));
                    }
                    if let Some(b) = b {
                        acc(&mut slots, *b, g.clone());
                    }
                }
                BackOp::Conv2d { x, w, b, stride, dilation } => {
                    if nodes[x.0].needs_grad {
                        let dx = ops::conv2d_bwd_x(
                            &g,
                            &nodes[w.0].value,
                            nodes[x.0].value.shape(),
                            *stride,
                            *dilation,
                        );
                        acc(&mut slots, *x, dx);
                    }
                    if nodes[w.0].needs_grad {
                        let dw = ops::conv2d_bwd_w(
                            &g,
                            &nodes[x.0].value,
                            nodes[w.0].value.shape(),
                            *stride,
                            *dilation,
                        );
                        acc(&mut slots, *w, dw);
                    }
                    if let Some(b) = b {
                        if nodes[b.0].needs_grad {
                            acc(&mut slots, *b, ops::conv2d_bwd_b(&g));
                        }
                    }
                }
                BackOp::Gap(a) => {
                    let (c, h, w) = nodes[a.0].value.dims3();
                    let inv = T::cast(1.0 / (h * w) as f64);
                    let mut dx = Array::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let gv = g.data()[ch] * inv;
                        for v in &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w] {
                            *v = gv;
                        }
                    }
                    acc(&mut slots, *a, dx);
                }
                BackOp::ScaleChannels { x, v } => {
                    if nodes[x.0].needs_grad {
                        acc(&mut slots, *x, ops::scale_channels_fwd(&g, &nodes[v.0].value));
                    }
                    if nodes[v.0].needs_grad {
                        let (c, _, _) = nodes[x.0].value.dims3();
                        let mut dv = Array::zeros(&[c]);
                        for ch in 0..c {
                            let s: T = g
                                .channel(ch)
                                .iter()
                                .zip(nodes[x.0].value.channel(ch))
                                .map(|(&gv, &xv)| gv * xv)
                                .sum();
                            dv.data_mut()[ch] = s;
                        }
                        acc(&mut slots, *v, dv);
                    }
                }
                BackOp::Concat0(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = nodes[p.0].value.shape().to_vec();
                        let n = nodes[p.0].value.numel();
                        if nodes[p.0].needs_grad {
                            let chunk = g.data()[offset..offset + n].to_vec();
                            acc(&mut slots, p, Array::from_vec(shape, chunk));
                        }
                        offset += n;
                    }
                }
                BackOp::SliceChannels { x, start } => {
                    acc(&mut slots, *x, ops::slice_c_bwd(&g, nodes[x.0].value.shape(), *start));
                }
                BackOp::Unfold { x, patch, stride } => {
                    let (c, h, w) = nodes[x.0].value.dims3();
                    acc(&mut slots, *x, ops::fold_raw(&g, c, h, w, *patch, *stride));
                }
                BackOp::Fold { tokens, patch, stride, normalized } => {
                    let (c, h, w) = node.value.dims3();
                    let dt = if *normalized {
                        let counts: Array<T> = ops::fold_counts(h, w, *patch, *stride);
                        let mut gn = g.clone();
                        let plane = h * w;
                        for ch in 0..c {
                            for (gv, &k) in gn.data_mut()[ch * plane..(ch + 1) * plane]
                                .iter_mut()
                                .zip(counts.data())
                            {
                                if k > T::zero() {
                                    *gv /= k;
                                }
                            }
                        }
                        ops::unfold_fwd(&gn, *patch, *stride)
                    } else {
                        ops::unfold_fwd(&g, *patch, *stride)
                    };
                    acc(&mut slots, *tokens, dt);
                }
                BackOp::PixelShuffle { x, factor } => {
                    acc(&mut slots, *x, ops::pixel_shuffle_bwd(&g, nodes[x.0].value.shape(), *factor));
                }
                BackOp::BilinearUp { x, factor } => {
                    acc(&mut slots, *x, ops::bilinear_up_bwd(&g, nodes[x.0].value.shape(), *factor));
                }
                BackOp::HaarBand { x, band } => {
                    acc(&mut slots, *x, ops::haar_band_bwd(&g, *band));
                }
                BackOp::HaarIwt(bands) => {
                    let parts = ops::haar_dwt_fwd(&g);
                    for (&b, part) in bands.iter().zip(parts) {
                        acc(&mut slots, b, part);
                    }
                }
                BackOp::Crop2d(x) => {
                    acc(&mut slots, *x, ops::crop2d_bwd(&g, nodes[x.0].value.shape()));
                }
            }
        }
        Ok(Gradients { slots })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;

    fn arr(shape: &[usize], data: &[f64]) -> Array<f64> {
        Array::from_vec(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn mul_backward_accumulates_on_shared_input() {
        let g = G::new();
        let x = g.param(arr(&[2], &[3.0, -2.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[6.0, -4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = G::new();
        let x = g.input(arr(&[2, 3], &[0.1, 2.0, -1.0, 5.0, 5.0, 5.0])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for row in 0..2 {
            let s: f64 = v.data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_is_inverse_of_unfold_when_patches_tile() {
        let g = G::new();
        let data: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.37 - 3.0).collect();
        let x = g.input(arr(&[2, 4, 4], &data)).unwrap();
        let t = g.unfold(x, 2, 2).unwrap();
        let y = g.fold(t, 2, 4, 4, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn haar_round_trip_is_identity() {
        let g = G::new();
        let data: Vec<f64> = (0..3 * 4 * 6).map(|i| (i as f64 * 0.711).sin()).collect();
        let x = g.input(arr(&[3, 4, 6], &data)).unwrap();
        let bands = g.haar_dwt(x).unwrap();
        let y = g.haar_iwt(bands).unwrap();
        let (xv, yv) = (g.value(x), g.value(y));
        for (a, b) in xv.data().iter().zip(yv.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn haar_of_constant_doubles_ll() {
        let g = G::new();
        let x = g.input(Array::full(&[1, 2, 2], 1.5)).unwrap();
        let [ll, lh, hl, hh] = g.haar_dwt(x).unwrap();
        assert_eq!(g.value(ll).data(), &[3.0]);
        assert_eq!(g.value(lh).data(), &[0.0]);
        assert_eq!(g.value(hl).data(), &[0.0]);
        assert_eq!(g.value(hh).data(), &[0.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let g = G::new();
        let err = g.input(arr(&[1], &[f64::NAN]));
        assert!(matches!(err, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = G::new();
        let a = g.input(arr(&[2], &[1.0, 2.0])).unwrap();
        let b = g.input(arr(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let g = G::new();
        let x = g.param(arr(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let g = G::new();
        let x = g.input(arr(&[2], &[1.0, 2.0])).unwrap();
        let p = g.param(arr(&[2], &[4.0, 5.0])).unwrap();
        let y = g.mul(x, p).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn fold_unnormalized_is_adjoint_of_unfold() {
        // <unfold(x), t> == <x, fold_raw(t)> for overlapping patches.
        let g = G::new();
        let xd: Vec<f64> = (0..1 * 5 * 5).map(|i| (i as f64).cos()).collect();
        let x = g.input(arr(&[1, 5, 5], &xd)).unwrap();
        let u = g.unfold(x, 3, 1).unwrap();
        let tok_shape = g.shape(u);
        let td: Vec<f64> = (0..tok_shape[0] * tok_shape[1]).map(|i| (i as f64 * 0.13).sin()).collect();
        let t = g.input(arr(&tok_shape, &td)).unwrap();
        let folded = g.fold_unnormalized(t, 1, 5, 5, 3, 1).unwrap();
        let lhs: f64 = g.value(u).data().iter().zip(&td).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(folded).data().iter().zip(&xd).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pixel_shuffle_places_channels_in_raster_order() {
        let g = G::new();
        // 4 channels of 1x1 become one 2x2 plane.
        let x = g.input(arr(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.pixel_shuffle_up(x, 2).unwrap();
        assert_eq!(g.shape(y), vec![1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bilinear_upsample_interpolates_midpoints() {
        let g = G::new();
        let x = g.input(arr(&[1, 1, 2], &[0.0, 3.0])).unwrap();
        let y = g.bilinear_upsample(x, 2).unwrap();
        // Corner alignment maps output x to source x*(1/3).
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 2, 4]);
        for (got, want) in v.data()[..4].iter().zip([0.0, 1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
