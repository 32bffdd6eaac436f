//! Dual-number forward mode: every value carries a primal and a tangent of
//! the same shape, and each primitive propagates both in one pass. This is
//! what computes Jacobian-vector products without ever materialising a
//! Jacobian.

use super::tape::{col_sum, softmax_backward, time_feature_values};
use super::{ops, quantize, Tensor};
use crate::attention::{self, AttentionOperands};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DualTensor {
    primal: Tensor,
    tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        primal.check_same_shape(&tangent, "dual")?;
        Ok(Self { primal, tangent })
    }

    /// A value with zero tangent: constant with respect to the seed.
    pub fn constant(primal: Tensor) -> Self {
        let tangent = Tensor::zeros(primal.shape());
        Self { primal, tangent }
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    pub fn tangent(&self) -> &Tensor {
        &self.tangent
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.primal, self.tangent)
    }

    pub fn shape(&self) -> &[usize] {
        self.primal.shape()
    }

    pub fn add(&self, other: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor {
            primal: ops::add(&self.primal, &other.primal)?,
            tangent: ops::add(&self.tangent, &other.tangent)?,
        })
    }

    pub fn sub(&self, other: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor {
            primal: ops::sub(&self.primal, &other.primal)?,
            tangent: ops::sub(&self.tangent, &other.tangent)?,
        })
    }

    pub fn mul(&self, other: &DualTensor) -> Result<DualTensor> {
        let t1 = ops::mul(&self.tangent, &other.primal)?;
        let t2 = ops::mul(&self.primal, &other.tangent)?;
        Ok(DualTensor {
            primal: ops::mul(&self.primal, &other.primal)?,
            tangent: ops::add(&t1, &t2)?,
        })
    }

    pub fn add_rowvec(&self, row: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor {
            primal: ops::add_row(&self.primal, &row.primal)?,
            tangent: ops::add_row(&self.tangent, &row.tangent)?,
        })
    }

    pub fn mul_rowvec(&self, row: &DualTensor) -> Result<DualTensor> {
        let t1 = ops::mul_row(&self.tangent, &row.primal)?;
        let t2 = ops::mul_row(&self.primal, &row.tangent)?;
        Ok(DualTensor {
            primal: ops::mul_row(&self.primal, &row.primal)?,
            tangent: ops::add(&t1, &t2)?,
        })
    }

    pub fn scale(&self, c: f64) -> DualTensor {
        DualTensor {
            primal: ops::scale(&self.primal, c),
            tangent: ops::scale(&self.tangent, c),
        }
    }

    /// Elementwise product with a `[1, 1]` dual scalar.
    pub fn scale_by(&self, s: &DualTensor) -> Result<DualTensor> {
        if s.primal.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let (sp, st) = (s.primal.item(), s.tangent.item());
        let t1 = ops::scale(&self.tangent, sp);
        let t2 = ops::scale(&self.primal, st);
        Ok(DualTensor {
            primal: ops::scale(&self.primal, sp),
            tangent: ops::add(&t1, &t2)?,
        })
    }

    pub fn matmul(&self, other: &DualTensor) -> Result<DualTensor> {
        let t1 = ops::matmul(&self.tangent, &other.primal)?;
        let t2 = ops::matmul(&self.primal, &other.tangent)?;
        Ok(DualTensor {
            primal: ops::matmul(&self.primal, &other.primal)?,
            tangent: ops::add(&t1, &t2)?,
        })
    }

    pub fn silu(&self) -> DualTensor {
        let tangent = Tensor::raw(
            self.primal.shape().to_vec(),
            self.primal
                .data()
                .iter()
                .zip(self.tangent.data())
                .map(|(&x, &tx)| quantize(tx * ops::silu_derivative(x)))
                .collect(),
        );
        DualTensor { primal: ops::silu(&self.primal), tangent }
    }

    pub fn softmax_rows(&self) -> Result<DualTensor> {
        let p = ops::softmax_rows(&self.primal)?;
        // Forward rule coincides with the reverse rule applied to the
        // tangent: dp = p * (ts - <p, ts>) per row.
        let tangent = softmax_backward(&p, &self.tangent);
        Ok(DualTensor { primal: p, tangent })
    }

    pub fn rms_norm(&self, eps: f64) -> DualTensor {
        let x = &self.primal;
        let tx = &self.tangent;
        let w = x.cols().max(1);
        let mut pd = Vec::with_capacity(x.numel());
        let mut td = Vec::with_capacity(x.numel());
        for (xrow, trow) in x.data().chunks_exact(w).zip(tx.data().chunks_exact(w)) {
            let ms = xrow.iter().map(|v| v * v).sum::<f64>() / w as f64;
            let r = (ms + eps).sqrt();
            let dot: f64 = xrow.iter().zip(trow).map(|(a, b)| a * b).sum();
            let c = dot / (w as f64 * r * r * r);
            for (&xv, &tv) in xrow.iter().zip(trow) {
                pd.push(quantize(xv / r));
                td.push(quantize(tv / r - xv * c));
            }
        }
        DualTensor {
            primal: Tensor::raw(x.shape().to_vec(), pd),
            tangent: Tensor::raw(x.shape().to_vec(), td),
        }
    }

    /// Attention with fused tangent propagation; runs the blocked kernel.
    pub fn attention(&self, k: &DualTensor, v: &DualTensor) -> Result<DualTensor> {
        let out = attention::attention_jvp_blocked(
            &AttentionOperands {
                q: self.primal.clone(),
                k: k.primal.clone(),
                v: v.primal.clone(),
                tq: self.tangent.clone(),
                tk: k.tangent.clone(),
                tv: v.tangent.clone(),
            },
            attention::DEFAULT_BLOCK,
        )?;
        Ok(DualTensor { primal: out.output, tangent: out.tangent })
    }

    pub fn gather_row(&self, idx: usize) -> Result<DualTensor> {
        let t = &self.primal;
        if t.shape().len() != 2 || idx >= t.rows() {
            return Err(Error::Malformed {
                what: "gather_row",
                detail: format!("row {idx} of shape {:?}", t.shape()),
            });
        }
        let w = t.cols();
        Ok(DualTensor {
            primal: Tensor::raw(vec![1, w], t.data()[idx * w..(idx + 1) * w].to_vec()),
            tangent: Tensor::raw(
                vec![1, w],
                self.tangent.data()[idx * w..(idx + 1) * w].to_vec(),
            ),
        })
    }

    pub fn slice_rows(&self, n: usize) -> Result<DualTensor> {
        let t = &self.primal;
        if t.shape().len() != 2 || n == 0 || n > t.rows() {
            return Err(Error::Malformed {
                what: "slice_rows",
                detail: format!("{n} rows of shape {:?}", t.shape()),
            });
        }
        let w = t.cols();
        Ok(DualTensor {
            primal: Tensor::raw(vec![n, w], t.data()[..n * w].to_vec()),
            tangent: Tensor::raw(vec![n, w], self.tangent.data()[..n * w].to_vec()),
        })
    }

    pub fn time_features(&self, freqs: &[f64]) -> Result<DualTensor> {
        if self.primal.numel() != 1 {
            return Err(Error::RankMismatch {
                op: "time_features",
                expected: 1,
                shape: self.primal.shape().to_vec(),
            });
        }
        let t = self.primal.item();
        let dt = self.tangent.item();
        let primal = time_feature_values(t, freqs);
        let k = freqs.len();
        let mut td = Vec::with_capacity(2 * k);
        for &w in freqs {
            td.push(quantize(w * (w * t).cos() * dt));
        }
        for &w in freqs {
            td.push(quantize(-w * (w * t).sin() * dt));
        }
        Ok(DualTensor { primal, tangent: Tensor::raw(vec![1, 2 * k], td) })
    }

    pub fn sum_sq(&self) -> DualTensor {
        let dot: f64 = self
            .primal
            .data()
            .iter()
            .zip(self.tangent.data())
            .map(|(a, b)| a * b)
            .sum();
        DualTensor {
            primal: ops::sum_sq(&self.primal),
            tangent: Tensor::scalar(2.0 * dot),
        }
    }

    pub fn mean_sq(&self) -> DualTensor {
        let n = self.primal.numel().max(1) as f64;
        let dot: f64 = self
            .primal
            .data()
            .iter()
            .zip(self.tangent.data())
            .map(|(a, b)| a * b)
            .sum();
        DualTensor {
            primal: ops::mean_sq(&self.primal),
            tangent: Tensor::scalar(2.0 * dot / n),
        }
    }

    /// Heaviside step has no tangent rule.
    pub fn step(&self) -> Result<DualTensor> {
        Err(Error::MissingTangentRule("step"))
    }

    /// Sum over rows into a `[1, w]` dual row vector.
    pub fn col_sum(&self) -> DualTensor {
        DualTensor { primal: col_sum(&self.primal), tangent: col_sum(&self.tangent) }
    }
}

/// Evaluate `f` and its Jacobian-vector product at `x` along direction `v`
/// in a single forward pass.
pub fn jvp_eval<F>(f: F, x: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&DualTensor) -> Result<DualTensor>,
{
    let seed = DualTensor::new(x.clone(), v.clone())?;
    let out = f(&seed)?;
    Ok(out.into_parts())
}
