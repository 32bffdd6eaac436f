//! Dense tensor numerics: the value type, its primitive operations, a
//! reverse-mode tape, dual-number forward mode, and finite-difference
//! oracles.
//!
//! Values are 32-bit floats by default: every primitive rounds its outputs
//! through `f32`, so anything stored in a [`Tensor`] is exactly
//! representable in 32 bits and round-trips through the binary checkpoint
//! format without loss. Oracle suites switch the current thread to
//! [`Precision::Double`] for full 64-bit arithmetic and the tight
//! tolerances that come with it.

mod dual;
mod fd;
mod ops;
mod params;
mod tape;

pub use dual::{jvp_eval, DualTensor};
pub use fd::{finite_diff_directional, finite_diff_grad};
pub use ops::{
    add, add_row, matmul, mean_sq, mul, mul_row, rms_norm, scale, silu, softmax_rows, sub, sum_sq,
    transpose,
};
pub use params::ParamSet;
pub use tape::{grad_eval, Tape, Val};

pub(crate) use tape::{softmax_backward as softmax_grad_rows, time_feature_values};

use crate::error::{Error, Result};
use std::cell::Cell;

/// Arithmetic precision of the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Default: every primitive rounds outputs to `f32`.
    Single,
    /// Full `f64` arithmetic, used by oracle test suites.
    Double,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::Single) };
}

/// Current precision mode of this thread.
pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

/// Set the precision mode for this thread.
pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

/// Run `f` with the given precision, restoring the previous mode afterwards.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    let prev = precision();
    set_precision(p);
    let out = f();
    set_precision(prev);
    out
}

#[inline]
pub(crate) fn quantize(x: f64) -> f64 {
    match precision() {
        Precision::Single => x as f32 as f64,
        Precision::Double => x,
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from raw data; `data.len()` must equal the product of
    /// `shape`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Malformed {
                what: "tensor",
                detail: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        let data = data.into_iter().map(quantize).collect();
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![quantize(value); numel] }
    }

    /// A 1x1 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![quantize(value)] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise map through the precision rounding.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| quantize(f(x))).collect(),
        }
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        quantize(self.data.iter().map(|x| x * x).sum())
    }

    pub fn norm(&self) -> f64 {
        quantize(self.sq_norm().sqrt())
    }

    /// Mean of absolute entries.
    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        quantize(self.data.iter().map(|x| x.abs()).sum::<f64>() / self.data.len() as f64)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Relative error between two tensors: `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den = b.data.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
