//! Primitive tensor operations.
//!
//! All reductions run in a fixed ascending-index order so results are
//! reproducible bit for bit.

use super::{quantize, Tensor};
use crate::error::{Error, Result};

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b, "add")?;
    zip_map(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b, "sub")?;
    zip_map(a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b, "mul")?;
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| quantize(f(x, y)))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Multiply every entry by a constant.
pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

/// Add a `[1, w]` row vector to every row of a `[n, w]` tensor.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    broadcast_row(a, row, "add_row", |x, y| x + y)
}

/// Multiply every row of a `[n, w]` tensor by a `[1, w]` row vector.
pub fn mul_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    broadcast_row(a, row, "mul_row", |x, y| x * y)
}

fn broadcast_row(
    a: &Tensor,
    row: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape().len() != 2 || row.shape() != [1, a.cols()] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: row.shape().to_vec(),
        });
    }
    let w = a.cols();
    let mut data = Vec::with_capacity(a.numel());
    for r in a.data().chunks_exact(w) {
        for (x, y) in r.iter().zip(row.data()) {
            data.push(quantize(f(*x, *y)));
        }
    }
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Standard matrix product of `[m, k]` and `[k, n]`.
///
/// Accumulation over the inner dimension runs in ascending index order for
/// every output element.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::RankMismatch { op: "matmul", expected: 2, shape: a.shape().to_vec() });
    }
    if b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        for o in orow.iter_mut() {
            *o = quantize(*o);
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::RankMismatch { op: "transpose", expected: 2, shape: a.shape().to_vec() });
    }
    let (m, n) = (a.rows(), a.cols());
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], data)
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(s: &Tensor) -> Result<Tensor> {
    if s.shape().len() < 2 {
        return Err(Error::RankMismatch { op: "softmax_rows", expected: 2, shape: s.shape().to_vec() });
    }
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows", context: None });
    }
    let w = *s.shape().last().expect("rank checked");
    let mut data = Vec::with_capacity(s.numel());
    for row in s.data().chunks_exact(w) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|&e| quantize(e / sum)));
    }
    Tensor::from_vec(s.shape().to_vec(), data)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid_scalar(v))
}

pub(crate) fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise RMS normalisation: `x / sqrt(mean(x^2) + eps)`, no affine part.
pub fn rms_norm(x: &Tensor, eps: f64) -> Tensor {
    let w = x.cols().max(1);
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(w) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / w as f64;
        let r = (ms + eps).sqrt();
        data.extend(row.iter().map(|&v| quantize(v / r)));
    }
    Tensor { shape: x.shape().to_vec(), data }
}

/// Sum of squared entries as a `[1, 1]` tensor.
pub fn sum_sq(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().map(|x| x * x).sum())
}

/// Mean of squared entries as a `[1, 1]` tensor.
pub fn mean_sq(a: &Tensor) -> Tensor {
    let n = a.numel().max(1) as f64;
    Tensor::scalar(a.data().iter().map(|x| x * x).sum::<f64>() / n)
}

// Struct fields are private to the module tree; ops.rs constructs tensors
// directly in one place to skip redundant shape checks.
impl Tensor {
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}
