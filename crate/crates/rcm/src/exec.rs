//! One model definition, three differentiation modes.
//!
//! Composite functions (the transformer, the consistency map, the losses)
//! are written once against [`Executor`] and run under plain evaluation,
//! dual-number forward mode, or the reverse-mode tape depending on which
//! implementation they are handed.

use crate::error::Result;
use crate::tensor::{self, DualTensor, ParamSet, Tape, Tensor, Val};
use std::collections::BTreeMap;

pub trait Executor {
    type V: Clone;

    fn constant(&mut self, t: Tensor) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Result<Self::V>;
    fn mul_row(&mut self, a: &Self::V, row: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn scale_by(&mut self, a: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn silu(&mut self, a: &Self::V) -> Self::V;
    fn rms_norm(&mut self, a: &Self::V, eps: f64) -> Self::V;
    fn attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V) -> Result<Self::V>;
    fn gather_row(&mut self, table: &Self::V, idx: usize) -> Result<Self::V>;
    fn slice_rows(&mut self, table: &Self::V, n: usize) -> Result<Self::V>;
    fn time_features(&mut self, t: &Self::V, freqs: &[f64]) -> Result<Self::V>;
    fn sum_sq(&mut self, a: &Self::V) -> Self::V;
    fn mean_sq(&mut self, a: &Self::V) -> Self::V;

    /// Current primal value.
    fn value(&self, a: &Self::V) -> Tensor;

    /// Lift a parameter set into this mode as constants.
    fn lift(&mut self, params: &ParamSet) -> BTreeMap<String, Self::V> {
        params
            .iter()
            .map(|(name, t)| (name.clone(), self.constant(t.clone())))
            .collect()
    }
}

/// Plain evaluation on tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct EvalExec;

impl Executor for EvalExec {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add(a, b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::mul(a, b)
    }
    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        tensor::add_row(a, row)
    }
    fn mul_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        tensor::mul_row(a, row)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        tensor::scale(a, c)
    }
    fn scale_by(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        Ok(tensor::scale(a, s.item()))
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul(a, b)
    }
    fn silu(&mut self, a: &Tensor) -> Tensor {
        tensor::silu(a)
    }
    fn rms_norm(&mut self, a: &Tensor, eps: f64) -> Tensor {
        tensor::rms_norm(a, eps)
    }
    fn attention(&mut self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        crate::attention::attention_forward(q, k, v)
    }
    fn gather_row(&mut self, table: &Tensor, idx: usize) -> Result<Tensor> {
        let w = table.cols();
        Tensor::from_vec(vec![1, w], table.data()[idx * w..(idx + 1) * w].to_vec())
    }
    fn slice_rows(&mut self, table: &Tensor, n: usize) -> Result<Tensor> {
        let w = table.cols();
        Tensor::from_vec(vec![n, w], table.data()[..n * w].to_vec())
    }
    fn time_features(&mut self, t: &Tensor, freqs: &[f64]) -> Result<Tensor> {
        Ok(crate::tensor::time_feature_values(t.item(), freqs))
    }
    fn sum_sq(&mut self, a: &Tensor) -> Tensor {
        tensor::sum_sq(a)
    }
    fn mean_sq(&mut self, a: &Tensor) -> Tensor {
        tensor::mean_sq(a)
    }
    fn value(&self, a: &Tensor) -> Tensor {
        a.clone()
    }
}

/// Dual-number forward mode.
#[derive(Debug, Default, Clone, Copy)]
pub struct DualExec;

impl Executor for DualExec {
    type V = DualTensor;

    fn constant(&mut self, t: Tensor) -> DualTensor {
        DualTensor::constant(t)
    }
    fn add(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        a.add(b)
    }
    fn sub(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        a.sub(b)
    }
    fn mul(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        a.mul(b)
    }
    fn add_row(&mut self, a: &DualTensor, row: &DualTensor) -> Result<DualTensor> {
        a.add_rowvec(row)
    }
    fn mul_row(&mut self, a: &DualTensor, row: &DualTensor) -> Result<DualTensor> {
        a.mul_rowvec(row)
    }
    fn scale(&mut self, a: &DualTensor, c: f64) -> DualTensor {
        a.scale(c)
    }
    fn scale_by(&mut self, a: &DualTensor, s: &DualTensor) -> Result<DualTensor> {
        a.scale_by(s)
    }
    fn matmul(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        a.matmul(b)
    }
    fn silu(&mut self, a: &DualTensor) -> DualTensor {
        a.silu()
    }
    fn rms_norm(&mut self, a: &DualTensor, eps: f64) -> DualTensor {
        a.rms_norm(eps)
    }
    fn attention(&mut self, q: &DualTensor, k: &DualTensor, v: &DualTensor) -> Result<DualTensor> {
        q.attention(k, v)
    }
    fn gather_row(&mut self, table: &DualTensor, idx: usize) -> Result<DualTensor> {
        table.gather_row(idx)
    }
    fn slice_rows(&mut self, table: &DualTensor, n: usize) -> Result<DualTensor> {
        table.slice_rows(n)
    }
    fn time_features(&mut self, t: &DualTensor, freqs: &[f64]) -> Result<DualTensor> {
        t.time_features(freqs)
    }
    fn sum_sq(&mut self, a: &DualTensor) -> DualTensor {
        a.sum_sq()
    }
    fn mean_sq(&mut self, a: &DualTensor) -> DualTensor {
        a.mean_sq()
    }
    fn value(&self, a: &DualTensor) -> Tensor {
        a.primal().clone()
    }
}

impl Executor for Tape {
    type V = Val;

    fn constant(&mut self, t: Tensor) -> Val {
        Tape::constant(self, t)
    }
    fn add(&mut self, a: &Val, b: &Val) -> Result<Val> {
        Tape::add(self, *a, *b)
    }
    fn sub(&mut self, a: &Val, b: &Val) -> Result<Val> {
        Tape::sub(self, *a, *b)
    }
    fn mul(&mut self, a: &Val, b: &Val) -> Result<Val> {
        Tape::mul(self, *a, *b)
    }
    fn add_row(&mut self, a: &Val, row: &Val) -> Result<Val> {
        Tape::add_row(self, *a, *row)
    }
    fn mul_row(&mut self, a: &Val, row: &Val) -> Result<Val> {
        Tape::mul_row(self, *a, *row)
    }
    fn scale(&mut self, a: &Val, c: f64) -> Val {
        Tape::scale(self, *a, c)
    }
    fn scale_by(&mut self, a: &Val, s: &Val) -> Result<Val> {
        Tape::scale_by(self, *a, *s)
    }
    fn matmul(&mut self, a: &Val, b: &Val) -> Result<Val> {
        Tape::matmul(self, *a, *b)
    }
    fn silu(&mut self, a: &Val) -> Val {
        Tape::silu(self, *a)
    }
    fn rms_norm(&mut self, a: &Val, eps: f64) -> Val {
        Tape::rms_norm(self, *a, eps)
    }
    fn attention(&mut self, q: &Val, k: &Val, v: &Val) -> Result<Val> {
        Tape::attention(self, *q, *k, *v)
    }
    fn gather_row(&mut self, table: &Val, idx: usize) -> Result<Val> {
        Tape::gather_row(self, *table, idx)
    }
    fn slice_rows(&mut self, table: &Val, n: usize) -> Result<Val> {
        Tape::slice_rows(self, *table, n)
    }
    fn time_features(&mut self, t: &Val, freqs: &[f64]) -> Result<Val> {
        Tape::time_features(self, *t, freqs)
    }
    fn sum_sq(&mut self, a: &Val) -> Val {
        Tape::sum_sq(self, *a)
    }
    fn mean_sq(&mut self, a: &Val) -> Val {
        Tape::mean_sq(self, *a)
    }
    fn value(&self, a: &Val) -> Tensor {
        Tape::value(self, *a).clone()
    }
}
