//! Dense row-major N-dimensional storage for the tensor engine.

use crate::scalar::Scalar;
use rand::Rng;

/// Plain value array: a shape plus contiguous row-major data.
///
/// Rank-0 arrays (empty shape, one element) represent scalars. Shape errors
/// at this level are programming errors and panic; the graph layer checks
/// operand compatibility before touching storage and reports `TensorError`.
#[derive(Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match {} elements", shape, data.len());
        Array { shape, data }
    }

    /// Rank-0 scalar.
    pub fn scalar(v: T) -> Self {
        Array { shape: Vec::new(), data: vec![v] }
    }

    /// Uniform draw in `[lo, hi)`, element order fixed by the RNG stream.
    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::cast(lo + (hi - lo) * rng.random::<f64>())).collect();
        Array { shape: shape.to_vec(), data }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// First element; the value of a rank-0 scalar.
    pub fn first(&self) -> T {
        self.data[0]
    }

    /// Dimensions of a rank-2 array.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "expected rank 2, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Dimensions of a rank-3 array, conventionally (channels, height, width).
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.rank(), 3, "expected rank 3, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// Dimensions of a rank-4 array, conventionally (out, in, kh, kw).
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "expected rank 4, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// Contiguous slice of channel `c` of a rank-3 array.
    pub fn channel(&self, c: usize) -> &[T] {
        let (ch, h, w) = self.dims3();
        assert!(c < ch);
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Array { shape: self.shape.clone(), data }
    }

    /// Elementwise accumulate, used for gradient aggregation.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: T) {
        for a in self.data.iter_mut() {
            *a *= k;
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn convert<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Array<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let head: Vec<&T> = self.data.iter().take(6).collect();
        write!(f, "Array{:?} {:?}{}", self.shape, head, if self.numel() > 6 { ".." } else { "" })
    }
}

/// Rotates a (C, H, W) array counterclockwise by `k` quarter turns.
pub fn rot90_chw<T: Scalar>(a: &Array<T>, k: usize) -> Array<T> {
    let (c, h, w) = a.dims3();
    let k = k % 4;
    if k == 0 {
        return a.clone();
    }
    let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
    let mut out = Array::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = a.channel(ch);
        let dst = &mut out.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                let (ny, nx) = match k {
                    1 => (w - 1 - x, y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (x, h - 1 - y),
                };
                dst[ny * ow + nx] = src[y * w + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_is_rank0_with_one_element() {
        let s = Array::scalar(3.5f64);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.first(), 3.5);
    }

    #[test]
    fn channel_slices_are_contiguous() {
        let a = Array::from_vec(&[2, 2, 3], (0..12).map(|v| v as f32).collect());
        assert_eq!(a.channel(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let a = Array::from_vec(&[1, 2, 3], (0..6).map(|v| v as f64).collect());
        let mut r = a.clone();
        for _ in 0..4 {
            r = rot90_chw(&r, 1);
        }
        assert_eq!(r, a);
        assert_eq!(rot90_chw(&a, 2).shape(), &[1, 2, 3]);
        assert_eq!(rot90_chw(&a, 1).shape(), &[1, 3, 2]);
    }

    #[test]
    fn rot90_moves_corner_correctly() {
        // 1x2x2 plane [[0,1],[2,3]]: one ccw turn puts the right column on top.
        let a = Array::from_vec(&[1, 2, 2], vec![0.0f64, 1.0, 2.0, 3.0]);
        let r = rot90_chw(&a, 1);
        assert_eq!(r.data(), &[1.0, 3.0, 0.0, 2.0]);
    }
}
