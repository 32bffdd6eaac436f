//! Reverse-mode automatic differentiation over a recorded operation tape.

use super::{ops, ParamSet, Tensor};
use crate::attention;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    AddRow(Val, Val),
    MulRow(Val, Val),
    Scale(Val, f64),
    ScaleBy(Val, Val),
    Matmul(Val, Val),
    Silu(Val),
    SoftmaxRows(Val),
    RmsNorm(Val, f64),
    Attention { q: Val, k: Val, v: Val },
    GatherRow(Val, usize),
    SliceRows(Val, usize),
    TimeFeatures(Val, Vec<f64>),
    SumSq(Val),
    MeanSq(Val),
    Step,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Matmul(..) => "matmul",
            Op::Silu(..) => "silu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::RmsNorm(..) => "rms_norm",
            Op::Attention { .. } => "attention",
            Op::GatherRow(..) => "gather_row",
            Op::SliceRows(..) => "slice_rows",
            Op::TimeFeatures(..) => "time_features",
            Op::SumSq(..) => "sum_sq",
            Op::MeanSq(..) => "mean_sq",
            Op::Step => "step",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-use gradient tape. Record a computation through the op methods,
/// call [`Tape::backward`] on a scalar output, then read gradients of the
/// leaves. Adjoint accumulation walks the tape strictly in reverse record
/// order, so gradients are reproducible bit for bit.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Val {
        self.nodes.push(Node { value, op });
        Val(self.nodes.len() - 1)
    }

    /// Record an input leaf (typically a parameter whose gradient is wanted).
    pub fn leaf(&mut self, t: Tensor) -> Val {
        self.push(t, Op::Leaf)
    }

    /// Record a constant input. Gradients still propagate through it but are
    /// simply never read.
    pub fn constant(&mut self, t: Tensor) -> Val {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: Val, row: Val) -> Result<Val> {
        let out = ops::add_row(self.value(a), self.value(row))?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Val, row: Val) -> Result<Val> {
        let out = ops::mul_row(self.value(a), self.value(row))?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let out = ops::scale(self.value(a), c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiply a tensor elementwise by a `[1, 1]` scalar value.
    pub fn scale_by(&mut self, a: Val, s: Val) -> Result<Val> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.value(a).shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let c = sv.item();
        let out = ops::scale(self.value(a), c);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn silu(&mut self, a: Val) -> Val {
        let out = ops::silu(self.value(a));
        self.push(out, Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: Val) -> Result<Val> {
        let out = ops::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn rms_norm(&mut self, a: Val, eps: f64) -> Val {
        let out = ops::rms_norm(self.value(a), eps);
        self.push(out, Op::RmsNorm(a, eps))
    }

    pub fn attention(&mut self, q: Val, k: Val, v: Val) -> Result<Val> {
        let out = attention::attention_forward(self.value(q), self.value(k), self.value(v))?;
        Ok(self.push(out, Op::Attention { q, k, v }))
    }

    /// Select one row of a `[r, w]` table as a `[1, w]` tensor.
    pub fn gather_row(&mut self, table: Val, idx: usize) -> Result<Val> {
        let t = self.value(table);
        if t.shape().len() != 2 || idx >= t.rows() {
            return Err(Error::Malformed {
                what: "gather_row",
                detail: format!("row {idx} of shape {:?}", t.shape()),
            });
        }
        let w = t.cols();
        let row = Tensor::from_vec(vec![1, w], t.data()[idx * w..(idx + 1) * w].to_vec())?;
        Ok(self.push(row, Op::GatherRow(table, idx)))
    }

    /// The first `n` rows of a rank-2 tensor.
    pub fn slice_rows(&mut self, table: Val, n: usize) -> Result<Val> {
        let t = self.value(table);
        if t.shape().len() != 2 || n == 0 || n > t.rows() {
            return Err(Error::Malformed {
                what: "slice_rows",
                detail: format!("{n} rows of shape {:?}", t.shape()),
            });
        }
        let w = t.cols();
        let out = Tensor::from_vec(vec![n, w], t.data()[..n * w].to_vec())?;
        Ok(self.push(out, Op::SliceRows(table, n)))
    }

    /// Sinusoidal features of a scalar: `[sin(w_i t)..., cos(w_i t)...]`.
    pub fn time_features(&mut self, t: Val, freqs: &[f64]) -> Result<Val> {
        let tv = self.value(t);
        if tv.numel() != 1 {
            return Err(Error::RankMismatch {
                op: "time_features",
                expected: 1,
                shape: tv.shape().to_vec(),
            });
        }
        let out = time_feature_values(tv.item(), freqs);
        Ok(self.push(out, Op::TimeFeatures(t, freqs.to_vec())))
    }

    pub fn sum_sq(&mut self, a: Val) -> Val {
        let out = ops::sum_sq(self.value(a));
        self.push(out, Op::SumSq(a))
    }

    pub fn mean_sq(&mut self, a: Val) -> Val {
        let out = ops::mean_sq(self.value(a));
        self.push(out, Op::MeanSq(a))
    }

    /// Heaviside step, 1 where the input is positive. Has no derivative.
    pub fn step(&mut self, a: Val) -> Val {
        let out = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(out, Op::Step)
    }

    fn accumulate(&mut self, v: Val, delta: Tensor) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (dst, src) in g.data_mut().iter_mut().zip(delta.data()) {
                    *dst = super::quantize(*dst + src);
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Run the reverse sweep from a scalar output.
    pub fn backward(&mut self, out: Val) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::Malformed {
                what: "backward",
                detail: format!("output must be scalar, got shape {:?}", self.value(out).shape()),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].clone() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, ops::scale(&g, -1.0));
                }
                Op::Mul(a, b) => {
                    let da = ops::mul(&g, self.value(b))?;
                    let db = ops::mul(&g, self.value(a))?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::AddRow(a, row) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(row, col_sum(&g));
                }
                Op::MulRow(a, row) => {
                    let da = row_product(&g, self.value(row));
                    let dr = col_sum(&ops::mul(&g, self.value(a))?);
                    self.accumulate(a, da);
                    self.accumulate(row, dr);
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, ops::scale(&g, c));
                }
                Op::ScaleBy(a, s) => {
                    let c = self.value(s).item();
                    let da = ops::scale(&g, c);
                    let ds = Tensor::scalar(
                        g.data()
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(x, y)| x * y)
                            .sum(),
                    );
                    self.accumulate(a, da);
                    self.accumulate(s, ds);
                }
                Op::Matmul(a, b) => {
                    let bt = ops::transpose(self.value(b))?;
                    let at = ops::transpose(self.value(a))?;
                    let da = ops::matmul(&g, &bt)?;
                    let db = ops::matmul(&at, &g)?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Silu(a) => {
                    let x = self.value(a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| super::quantize(gv * ops::silu_derivative(xv)))
                        .collect();
                    self.accumulate(a, Tensor::from_vec(x.shape().to_vec(), data)?);
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.nodes[i].value;
                    let da = softmax_backward(p, &g);
                    self.accumulate(a, da);
                }
                Op::RmsNorm(a, eps) => {
                    let da = rms_norm_backward(self.value(a), &g, eps);
                    self.accumulate(a, da);
                }
                Op::Attention { q, k, v } => {
                    let (dq, dk, dv) = attention::attention_backward(
                        self.value(q),
                        self.value(k),
                        self.value(v),
                        &g,
                    )?;
                    self.accumulate(q, dq);
                    self.accumulate(k, dk);
                    self.accumulate(v, dv);
                }
                Op::GatherRow(table, idx) => {
                    let t = self.value(table);
                    let mut d = Tensor::zeros(t.shape());
                    let w = t.cols();
                    d.data_mut()[idx * w..(idx + 1) * w].copy_from_slice(g.data());
                    self.accumulate(table, d);
                }
                Op::SliceRows(table, n) => {
                    let t = self.value(table);
                    let mut d = Tensor::zeros(t.shape());
                    let w = t.cols();
                    d.data_mut()[..n * w].copy_from_slice(g.data());
                    self.accumulate(table, d);
                }
                Op::TimeFeatures(t, freqs) => {
                    let tv = self.value(t).item();
                    let k = freqs.len();
                    let mut dt = 0.0;
                    for (i, &w) in freqs.iter().enumerate() {
                        dt += g.data()[i] * w * (w * tv).cos();
                        dt -= g.data()[k + i] * w * (w * tv).sin();
                    }
                    self.accumulate(t, Tensor::scalar(dt));
                }
                Op::SumSq(a) => {
                    let da = ops::scale(self.value(a), 2.0 * g.item());
                    self.accumulate(a, da);
                }
                Op::MeanSq(a) => {
                    let n = self.value(a).numel().max(1) as f64;
                    let da = ops::scale(self.value(a), 2.0 * g.item() / n);
                    self.accumulate(a, da);
                }
                Op::Step => {
                    return Err(Error::NonDifferentiable(self.nodes[i].op.name()));
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Val) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub(crate) fn time_feature_values(t: f64, freqs: &[f64]) -> Tensor {
    let k = freqs.len();
    let mut data = Vec::with_capacity(2 * k);
    for &w in freqs {
        data.push(super::quantize((w * t).sin()));
    }
    for &w in freqs {
        data.push(super::quantize((w * t).cos()));
    }
    Tensor::raw(vec![1, 2 * k], data)
}

/// Sum a `[n, w]` tensor over rows into `[1, w]`, rows in ascending order.
pub(crate) fn col_sum(a: &Tensor) -> Tensor {
    let w = a.cols();
    let mut out = vec![0.0; w];
    for row in a.data().chunks_exact(w) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::raw(vec![1, w], out.into_iter().map(super::quantize).collect())
}

fn row_product(g: &Tensor, row: &Tensor) -> Tensor {
    let w = g.cols();
    let mut data = Vec::with_capacity(g.numel());
    for r in g.data().chunks_exact(w) {
        for (x, y) in r.iter().zip(row.data()) {
            data.push(super::quantize(x * y));
        }
    }
    Tensor::raw(g.shape().to_vec(), data)
}

/// Reverse rule of row softmax: `ds = p * (g - <g, p>)` per row.
pub(crate) fn softmax_backward(p: &Tensor, g: &Tensor) -> Tensor {
    let w = *p.shape().last().expect("softmax output has rank >= 2");
    let mut data = Vec::with_capacity(p.numel());
    for (prow, grow) in p.data().chunks_exact(w).zip(g.data().chunks_exact(w)) {
        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
        data.extend(prow.iter().zip(grow).map(|(&pv, &gv)| super::quantize(pv * (gv - dot))));
    }
    Tensor::raw(p.shape().to_vec(), data)
}

fn rms_norm_backward(x: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let w = x.cols().max(1);
    let mut data = Vec::with_capacity(x.numel());
    for (xrow, grow) in x.data().chunks_exact(w).zip(g.data().chunks_exact(w)) {
        let ms = xrow.iter().map(|v| v * v).sum::<f64>() / w as f64;
        let r = (ms + eps).sqrt();
        let dot: f64 = xrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        let c = dot / (w as f64 * r * r * r);
        data.extend(
            xrow.iter()
                .zip(grow)
                .map(|(&xv, &gv)| super::quantize(gv / r - xv * c)),
        );
    }
    Tensor::raw(x.shape().to_vec(), data)
}

/// Exact reverse-mode gradient of a scalar-valued function of a parameter
/// set. The function must be expressed through the tape's primitive
/// operations; leaves are registered in flattening order.
pub fn grad_eval<F>(f: F, params: &ParamSet) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape, &BTreeMap<String, Val>) -> Result<Val>,
{
    let mut tape = Tape::new();
    let mut vals = BTreeMap::new();
    for (name, t) in params.iter() {
        vals.insert(name.clone(), tape.leaf(t.clone()));
    }
    let out = f(&mut tape, &vals)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Malformed {
            what: "grad_eval",
            detail: format!("function output must be scalar, got {:?}", tape.value(out).shape()),
        });
    }
    let value = tape.value(out).item();
    tape.backward(out)?;
    let mut grads = ParamSet::new();
    for (name, v) in &vals {
        let g = tape
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()));
        grads.insert(name.clone(), g);
    }
    Ok((value, grads))
}
