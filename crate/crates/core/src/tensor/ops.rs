//! Forward kernels and vector-Jacobian products.
//!
//! Everything here is pure array math on validated shapes; the graph layer
//! performs the validation and owns the backward dispatch. Feature maps are
//! (C, H, W), convolution weights (Cout, Cin, KH, KW), token matrices
//! (N, C). Convolutions use zero "same" padding: output spatial size is
//! ceil(in/stride) for odd kernels.

use super::array::Array;
use crate::scalar::Scalar;

pub(crate) fn conv2d_out_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
) -> (usize, usize) {
    let eff_h = dilation * (kh - 1) + 1;
    let eff_w = dilation * (kw - 1) + 1;
    let ph = dilation * (kh - 1) / 2;
    let pw = dilation * (kw - 1) / 2;
    ((h + 2 * ph - eff_h) / stride + 1, (w + 2 * pw - eff_w) / stride + 1)
}

/// Valid output-column range for one kernel tap: ox such that
/// ix = ox*stride + shift lies in [0, w).
#[inline]
fn ox_range(ow: usize, w: usize, stride: usize, shift: isize) -> (usize, usize) {
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(stride) };
    let hi = if (w as isize) <= shift {
        0
    } else {
        (((w as isize - 1 - shift) as usize) / stride + 1).min(ow)
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_fwd<T: Scalar>(
    x: &Array<T>,
    w: &Array<T>,
    b: Option<&Array<T>>,
    stride: usize,
    dilation: usize,
) -> Array<T> {
    let (ci, h, wd) = x.dims3();
    let (co, _, kh, kw) = w.dims4();
    let (oh, ow) = conv2d_out_hw(h, wd, kh, kw, stride, dilation);
    let ph = (dilation * (kh - 1) / 2) as isize;
    let pw = (dilation * (kw - 1) / 2) as isize;
    let mut out = Array::zeros(&[co, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    let os = out.data_mut();
    for c_out in 0..co {
        let obase = c_out * oh * ow;
        if let Some(bias) = b {
            let bv = bias.data()[c_out];
            for v in &mut os[obase..obase + oh * ow] {
                *v = bv;
            }
        }
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = ws[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let shift_x = (kx * dilation) as isize - pw;
                    let (x0, x1) = ox_range(ow, wd, stride, shift_x);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * wd;
                        let orow = obase + oy * ow;
                        if stride == 1 {
                            let src0 = (xrow as isize + x0 as isize + shift_x) as usize;
                            let dst = &mut os[orow + x0..orow + x1];
                            let src = &xs[src0..src0 + (x1 - x0)];
                            for (o, &xv) in dst.iter_mut().zip(src) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = (ox * stride) as isize + shift_x;
                                os[orow + ox] += wv * xs[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_bwd_x<T: Scalar>(
    g: &Array<T>,
    w: &Array<T>,
    x_shape: &[usize],
    stride: usize,
    dilation: usize,
) -> Array<T> {
    let (ci, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let (co, _, kh, kw) = w.dims4();
    let (_, oh, ow) = g.dims3();
    let ph = (dilation * (kh - 1) / 2) as isize;
    let pw = (dilation * (kw - 1) / 2) as isize;
    let mut dx = Array::zeros(x_shape);
    let gs = g.data();
    let ws = w.data();
    let ds = dx.data_mut();
    for c_out in 0..co {
        let gbase = c_out * oh * ow;
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = ws[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let shift_x = (kx * dilation) as isize - pw;
                    let (x0, x1) = ox_range(ow, wd, stride, shift_x);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * wd;
                        let grow = gbase + oy * ow;
                        if stride == 1 {
                            let dst0 = (xrow as isize + x0 as isize + shift_x) as usize;
                            let dst = &mut ds[dst0..dst0 + (x1 - x0)];
                            let src = &gs[grow + x0..grow + x1];
                            for (d, &gv) in dst.iter_mut().zip(src) {
                                *d += wv * gv;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = (ox * stride) as isize + shift_x;
                                ds[xrow + ix as usize] += wv * gs[grow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv2d_bwd_w<T: Scalar>(
    g: &Array<T>,
    x: &Array<T>,
    w_shape: &[usize],
    stride: usize,
    dilation: usize,
) -> Array<T> {
    let (ci, h, wd) = x.dims3();
    let (co, oh, ow) = g.dims3();
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let ph = (dilation * (kh - 1) / 2) as isize;
    let pw = (dilation * (kw - 1) / 2) as isize;
    let mut dw = Array::zeros(w_shape);
    let gs = g.data();
    let xs = x.data();
    let ds = dw.data_mut();
    for c_out in 0..co {
        let gbase = c_out * oh * ow;
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            for ky in 0..kh {
                for kx in 0..kw {
                    let shift_x = (kx * dilation) as isize - pw;
                    let (x0, x1) = ox_range(ow, wd, stride, shift_x);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * wd;
                        let grow = gbase + oy * ow;
                        if stride == 1 {
                            let src0 = (xrow as isize + x0 as isize + shift_x) as usize;
                            let xv = &xs[src0..src0 + (x1 - x0)];
                            let gv = &gs[grow + x0..grow + x1];
                            for (&a, &b) in xv.iter().zip(gv) {
                                acc += a * b;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = (ox * stride) as isize + shift_x;
                                acc += xs[xrow + ix as usize] * gs[grow + ox];
                            }
                        }
                    }
                    ds[((c_out * ci + c_in) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    dw
}

pub(crate) fn conv2d_bwd_b<T: Scalar>(g: &Array<T>) -> Array<T> {
    let (co, oh, ow) = g.dims3();
    let mut db = Array::zeros(&[co]);
    for c in 0..co {
        db.data_mut()[c] = g.channel(c).iter().copied().sum();
    }
    let _ = oh * ow;
    db
}

pub(crate) fn matmul_fwd<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    let (n, k) = a.dims2();
    let (_, m) = b.dims2();
    let mut out = Array::zeros(&[n, m]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..n {
        let orow = &mut od[i * m..(i + 1) * m];
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose2<T: Scalar>(a: &Array<T>) -> Array<T> {
    let (n, m) = a.dims2();
    let mut out = Array::zeros(&[m, n]);
    let ad = a.data();
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..m {
            od[j * n + i] = ad[i * m + j];
        }
    }
    out
}

/// Row-wise softmax of a rank-2 array, numerically stabilized.
pub(crate) fn softmax_rows_fwd<T: Scalar>(a: &Array<T>) -> Array<T> {
    let (n, m) = a.dims2();
    let mut out = a.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * m..(i + 1) * m];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// VJP of row softmax given its own output `y`.
pub(crate) fn softmax_rows_bwd<T: Scalar>(g: &Array<T>, y: &Array<T>) -> Array<T> {
    let (n, m) = y.dims2();
    let mut dx = Array::zeros(&[n, m]);
    for i in 0..n {
        let yr = &y.data()[i * m..(i + 1) * m];
        let gr = &g.data()[i * m..(i + 1) * m];
        let dot: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
        let dr = &mut dx.data_mut()[i * m..(i + 1) * m];
        for j in 0..m {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

pub(crate) fn gap_fwd<T: Scalar>(x: &Array<T>) -> Array<T> {
    let (c, h, w) = x.dims3();
    let inv = T::cast(1.0 / (h * w) as f64);
    let mut out = Array::zeros(&[c]);
    for ch in 0..c {
        let s: T = x.channel(ch).iter().copied().sum();
        out.data_mut()[ch] = s * inv;
    }
    out
}

pub(crate) fn scale_channels_fwd<T: Scalar>(x: &Array<T>, v: &Array<T>) -> Array<T> {
    let (c, h, w) = x.dims3();
    let mut out = x.clone();
    for ch in 0..c {
        let k = v.data()[ch];
        for o in &mut out.data_mut()[ch * h * w..(ch + 1) * h * w] {
            *o *= k;
        }
    }
    out
}

pub(crate) fn unfold_fwd<T: Scalar>(x: &Array<T>, patch: usize, stride: usize) -> Array<T> {
    let (c, h, w) = x.dims3();
    let nh = (h - patch) / stride + 1;
    let nw = (w - patch) / stride + 1;
    let tok = c * patch * patch;
    let mut out = Array::zeros(&[nh * nw, tok]);
    let xs = x.data();
    let od = out.data_mut();
    for py in 0..nh {
        for px in 0..nw {
            let trow = (py * nw + px) * tok;
            for ch in 0..c {
                for dy in 0..patch {
                    let src = (ch * h + py * stride + dy) * w + px * stride;
                    let dst = trow + (ch * patch + dy) * patch;
                    od[dst..dst + patch].copy_from_slice(&xs[src..src + patch]);
                }
            }
        }
    }
    out
}

/// Pure adjoint of `unfold_fwd`: scatter-add of token entries.
pub(crate) fn fold_raw<T: Scalar>(
    tokens: &Array<T>,
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
    stride: usize,
) -> Array<T> {
    let nh = (h - patch) / stride + 1;
    let nw = (w - patch) / stride + 1;
    let tok = c * patch * patch;
    let mut out = Array::zeros(&[c, h, w]);
    let td = tokens.data();
    let od = out.data_mut();
    for py in 0..nh {
        for px in 0..nw {
            let trow = (py * nw + px) * tok;
            for ch in 0..c {
                for dy in 0..patch {
                    let dst = (ch * h + py * stride + dy) * w + px * stride;
                    let src = trow + (ch * patch + dy) * patch;
                    for k in 0..patch {
                        od[dst + k] += td[src + k];
                    }
                }
            }
        }
    }
    out
}

/// Per-pixel patch coverage counts for the given geometry.
pub(crate) fn fold_counts<T: Scalar>(h: usize, w: usize, patch: usize, stride: usize) -> Array<T> {
    let nh = (h - patch) / stride + 1;
    let nw = (w - patch) / stride + 1;
    let mut out = Array::zeros(&[h, w]);
    let od = out.data_mut();
    for py in 0..nh {
        for px in 0..nw {
            for dy in 0..patch {
                let row = (py * stride + dy) * w + px * stride;
                for k in 0..patch {
                    od[row + k] += T::one();
                }
            }
        }
    }
    out
}

pub(crate) fn pixel_shuffle_fwd<T: Scalar>(x: &Array<T>, r: usize) -> Array<T> {
    let (c, h, w) = x.dims3();
    let co = c / (r * r);
    let mut out = Array::zeros(&[co, h * r, w * r]);
    let xs = x.data();
    let od = out.data_mut();
    let (oh, ow) = (h * r, w * r);
    for c2 in 0..co {
        for dy in 0..r {
            for dx in 0..r {
                let cin = c2 * r * r + dy * r + dx;
                for y in 0..h {
                    let src = (cin * h + y) * w;
                    let dst = (c2 * oh + y * r + dy) * ow + dx;
                    for x0 in 0..w {
                        od[dst + x0 * r] = xs[src + x0];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn pixel_shuffle_bwd<T: Scalar>(g: &Array<T>, x_shape: &[usize], r: usize) -> Array<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let co = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut dx = Array::zeros(x_shape);
    let gd = g.data();
    let dd = dx.data_mut();
    for c2 in 0..co {
        for dy in 0..r {
            for dx0 in 0..r {
                let cin = c2 * r * r + dy * r + dx0;
                for y in 0..h {
                    let dst = (cin * h + y) * w;
                    let src = (c2 * oh + y * r + dy) * ow + dx0;
                    for x0 in 0..w {
                        dd[dst + x0] = gd[src + x0 * r];
                    }
                }
            }
        }
    }
    dx
}

/// Source coordinate tables for align-corners bilinear resampling.
fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_out <= 1 || n_in <= 1 {
                return (0, 0, 0.0);
            }
            let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_up_fwd<T: Scalar>(x: &Array<T>, factor: usize) -> Array<T> {
    let (c, h, w) = x.dims3();
    let (oh, ow) = (h * factor, w * factor);
    let ys = bilinear_axis(h, oh);
    let xs_t = bilinear_axis(w, ow);
    let mut out = Array::zeros(&[c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        let obase = ch * oh * ow;
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let r0 = base + y0 * w;
            let r1 = base + y1 * w;
            let orow = obase + oy * ow;
            for (ox, &(x0, x1, wx)) in xs_t.iter().enumerate() {
                let v00 = xd[r0 + x0].as_f64();
                let v01 = xd[r0 + x1].as_f64();
                let v10 = xd[r1 + x0].as_f64();
                let v11 = xd[r1 + x1].as_f64();
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                od[orow + ox] = T::cast(top + (bot - top) * wy);
            }
        }
    }
    out
}

pub(crate) fn bilinear_up_bwd<T: Scalar>(g: &Array<T>, x_shape: &[usize], factor: usize) -> Array<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let ys = bilinear_axis(h, oh);
    let xs_t = bilinear_axis(w, ow);
    let mut dx = Array::zeros(x_shape);
    let gd = g.data();
    let dd = dx.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        let obase = ch * oh * ow;
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let orow = obase + oy * ow;
            for (ox, &(x0, x1, wx)) in xs_t.iter().enumerate() {
                let gv = gd[orow + ox].as_f64();
                dd[base + y0 * w + x0] += T::cast(gv * (1.0 - wy) * (1.0 - wx));
                dd[base + y0 * w + x1] += T::cast(gv * (1.0 - wy) * wx);
                dd[base + y1 * w + x0] += T::cast(gv * wy * (1.0 - wx));
                dd[base + y1 * w + x1] += T::cast(gv * wy * wx);
            }
        }
    }
    dx
}

/// Orthonormal single-level Haar analysis: returns [LL, LH, HL, HH], each
/// half the spatial size. LH carries horizontal detail, HL vertical.
pub(crate) fn haar_dwt_fwd<T: Scalar>(x: &Array<T>) -> [Array<T>; 4] {
    let (c, h, w) = x.dims3();
    let (h2, w2) = (h / 2, w / 2);
    let half = T::cast(0.5);
    let mut bands = [
        Array::zeros(&[c, h2, w2]),
        Array::zeros(&[c, h2, w2]),
        Array::zeros(&[c, h2, w2]),
        Array::zeros(&[c, h2, w2]),
    ];
    let xd = x.data();
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let p = (ch * h + 2 * i) * w + 2 * j;
                let a = xd[p];
                let b = xd[p + 1];
                let cc = xd[p + w];
                let d = xd[p + w + 1];
                let q = (ch * h2 + i) * w2 + j;
                bands[0].data_mut()[q] = (a + b + cc + d) * half;
                bands[1].data_mut()[q] = (a - b + cc - d) * half;
                bands[2].data_mut()[q] = (a + b - cc - d) * half;
                bands[3].data_mut()[q] = (a - b - cc + d) * half;
            }
        }
    }
    bands
}

/// Orthonormal single-level Haar synthesis, exact inverse of the analysis.
pub(crate) fn haar_iwt_fwd<T: Scalar>(bands: [&Array<T>; 4]) -> Array<T> {
    let (c, h2, w2) = bands[0].dims3();
    let (h, w) = (h2 * 2, w2 * 2);
    let half = T::cast(0.5);
    let mut out = Array::zeros(&[c, h, w]);
    let od = out.data_mut();
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let q = (ch * h2 + i) * w2 + j;
                let ll = bands[0].data()[q];
                let lh = bands[1].data()[q];
                let hl = bands[2].data()[q];
                let hh = bands[3].data()[q];
                let p = (ch * h + 2 * i) * w + 2 * j;
                od[p] = (ll + lh + hl + hh) * half;
                od[p + 1] = (ll - lh + hl - hh) * half;
                od[p + w] = (ll + lh - hl - hh) * half;
                od[p + w + 1] = (ll - lh - hl + hh) * half;
            }
        }
    }
    out
}

/// Synthesis restricted to one band: the VJP of extracting that band.
pub(crate) fn haar_band_bwd<T: Scalar>(g_band: &Array<T>, band: usize) -> Array<T> {
    let (c, h2, w2) = g_band.dims3();
    let zero = Array::zeros(&[c, h2, w2]);
    let mut refs: [&Array<T>; 4] = [&zero, &zero, &zero, &zero];
    refs[band] = g_band;
    haar_iwt_fwd(refs)
}

/// Dense affine map on a vector: w (m, n) times x (n), plus optional bias.
pub(crate) fn matvec_fwd<T: Scalar>(w: &Array<T>, x: &Array<T>, b: Option<&Array<T>>) -> Array<T> {
    let (m, n) = w.dims2();
    let mut out = Array::zeros(&[m]);
    let wd = w.data();
    let xd = x.data();
    for i in 0..m {
        let mut acc = match b {
            Some(bias) => bias.data()[i],
            None => T::zero(),
        };
        for (wv, xv) in wd[i * n..(i + 1) * n].iter().zip(xd) {
            acc += *wv * *xv;
        }
        out.data_mut()[i] = acc;
    }
    out
}

pub(crate) fn matvec_bwd_x<T: Scalar>(g: &Array<T>, w: &Array<T>) -> Array<T> {
    let (m, n) = w.dims2();
    let mut dx = Array::zeros(&[n]);
    let wd = w.data();
    let gd = g.data();
    let dd = dx.data_mut();
    for i in 0..m {
        let gv = gd[i];
        for (d, wv) in dd.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
            *d += gv * *wv;
        }
    }
    dx
}

pub(crate) fn matvec_bwd_w<T: Scalar>(g: &Array<T>, x: &Array<T>) -> Array<T> {
    let m = g.numel();
    let n = x.numel();
    let mut dw = Array::zeros(&[m, n]);
    let dd = dw.data_mut();
    for i in 0..m {
        let gv = g.data()[i];
        for (d, xv) in dd[i * n..(i + 1) * n].iter_mut().zip(x.data()) {
            *d = gv * *xv;
        }
    }
    dw
}

pub(crate) fn slice_c_fwd<T: Scalar>(x: &Array<T>, start: usize, len: usize) -> Array<T> {
    let (_, h, w) = x.dims3();
    let plane = h * w;
    let mut out = Array::zeros(&[len, h, w]);
    out.data_mut()
        .copy_from_slice(&x.data()[start * plane..(start + len) * plane]);
    out
}

pub(crate) fn slice_c_bwd<T: Scalar>(g: &Array<T>, x_shape: &[usize], start: usize) -> Array<T> {
    let plane = x_shape[1] * x_shape[2];
    let mut dx = Array::zeros(x_shape);
    dx.data_mut()[start * plane..start * plane + g.numel()].copy_from_slice(g.data());
    dx
}

pub(crate) fn crop2d_fwd<T: Scalar>(x: &Array<T>, h2: usize, w2: usize) -> Array<T> {
    let (c, h, w) = x.dims3();
    let mut out = Array::zeros(&[c, h2, w2]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for y in 0..h2 {
            let src = (ch * h + y) * w;
            let dst = (ch * h2 + y) * w2;
            od[dst..dst + w2].copy_from_slice(&xd[src..src + w2]);
        }
    }
    out
}

pub(crate) fn crop2d_bwd<T: Scalar>(g: &Array<T>, x_shape: &[usize]) -> Array<T> {
    let (c, h2, w2) = g.dims3();
    let (h, w) = (x_shape[1], x_shape[2]);
    let mut dx = Array::zeros(x_shape);
    let gd = g.data();
    let dd = dx.data_mut();
    for ch in 0..c {
        for y in 0..h2 {
            let src = (ch * h2 + y) * w2;
            let dst = (ch * h + y) * w;
            dd[dst..dst + w2].copy_from_slice(&gd[src..src + w2]);
        }
    }
    dx
}
