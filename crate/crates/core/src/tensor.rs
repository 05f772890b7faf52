//! Dense row-major tensors and the numeric kernels shared by the autodiff
//! graph and the incremental decoder.
//!
//! Every kernel computes each output row from its input row alone with a
//! fixed accumulation order, so a row's value does not depend on how many
//! other rows are processed in the same call. The decoder relies on this to
//! reproduce full-sequence forward passes bit for bit.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type: `f32` for training and inference, `f64` for
/// gradient verification.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cast<T: Real>(v: f64) -> T {
    <T as Real>::of_f64(v)
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| cast(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &s)| {
            assert!(i < s, "index {i} out of bounds for dim {s}");
            acc * s + i
        })
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| cast::<U>(v.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm_rows(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub(crate) fn gemm_rows<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · g` where `a` is m×k and `g` is m×n.
pub(crate) fn gemm_tn<T: Real>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
}

/// Adds `bias` to every row of `x` in place.
pub(crate) fn add_row_inplace<T: Real>(x: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Layer normalisation of one row; returns `(mean, 1/std)`.
pub(crate) fn layer_norm_row<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
) -> (T, T) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * rstd * g + b;
    }
    (mean, rstd)
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape("layer_norm", &x.shape, &gain.shape));
    }
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.data.chunks(c).zip(out.chunks_mut(c)) {
        layer_norm_row(xr, &gain.data, &bias.data, eps, or);
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax along the last axis.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.has_nan() {
        return Err(Error::NaN("softmax input".into()));
    }
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data.chunks_mut(c) {
        softmax_row(row);
    }
    Ok(out)
}

/// Log-softmax of one row.
pub fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Single-head attention for one query row.
///
/// `keys`/`values` are row-major with row stride `stride`; the head occupies
/// columns `off..off + q.len()`. Only rows listed in `visible` participate,
/// in the given order. Writes the attention weights to `probs` (aligned with
/// `visible`) and accumulates the weighted values into `out`.
pub(crate) fn attend_row<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    stride: usize,
    off: usize,
    visible: &[usize],
    scale: T,
    probs: &mut Vec<T>,
    out: &mut [T],
) {
    let dk = q.len();
    probs.clear();
    if visible.is_empty() {
        return;
    }
    for &j in visible {
        let k = &keys[j * stride + off..j * stride + off + dk];
        let mut s = T::zero();
        for (&a, &b) in q.iter().zip(k) {
            s += a * b;
        }
        probs.push(s * scale);
    }
    softmax_row(probs);
    for (&p, &j) in probs.iter().zip(visible) {
        let v = &values[j * stride + off..j * stride + off + dk];
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += p * vv;
        }
    }
}

/// Sinusoidal positional encodings, `len × d`.
pub fn positional_encoding<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(cast(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor {
        shape: vec![len, d],
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let i = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 2], &[3., 4., 5., 6.]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn row_by_column() {
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[3., 4.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let x = Tensor::<f64>::from_f64(&[3], &[0., 0., 0.]).unwrap();
        for &p in softmax(&x).unwrap().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = Tensor::<f32>::from_f64(&[2], &[1000., 0.]).unwrap();
        let s = softmax(&y).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-30);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::<f32>::from_f64(&[2], &[f64::NAN, 0.]).unwrap();
        assert!(matches!(softmax(&x), Err(Error::NaN(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::<f64>::full(&[4], 1.0);
        let b = Tensor::<f64>::zeros(&[4]);
        let x = Tensor::<f64>::full(&[1, 4], 7.0);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g = Tensor::<f64>::full(&[2], 1.0);
        let b = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::<f64>::from_f64(&[1, 2], &[1., 3.]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gemm_rows_are_independent_of_batch() {
        let a = Tensor::<f32>::from_f64(
            &[3, 4],
            &[
                0.1, -0.7, 1.3, 2.2, 0.5, 0.25, -1.5, 3.0, 9.0, -0.3, 0.01, 0.4,
            ],
        )
        .unwrap();
        let b =
            Tensor::<f32>::from_f64(&[4, 2], &[0.3, 1.1, -2.0, 0.7, 0.9, 0.05, 1.7, -0.6]).unwrap();
        let full = matmul(&a, &b).unwrap();
        for i in 0..3 {
            let row = Tensor::new(&[1, 4], a.row(i).to_vec()).unwrap();
            assert_eq!(matmul(&row, &b).unwrap().data(), full.row(i));
        }
    }

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    }
}
