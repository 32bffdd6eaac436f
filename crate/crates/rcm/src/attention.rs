//! Single-head attention and its tangent (JVP) propagation.
//!
//! Two implementations are provided. [`attention_jvp_reference`] materialises
//! the full attention matrix `P`, the score tangent `tS`, and the product
//! `H = P .* tS`, following
//!
//! ```text
//! O  = softmax(Q K^T / sqrt(d)) V = P V
//! tO = P tV + H V - diag(rowsum(H)) O
//! ```
//!
//! term by term; it is oracle-grade and O(n^2) in memory.
//! [`attention_jvp_blocked`] streams over key/value blocks with a running
//! row maximum and running row sums, keeping only O(block + d) scratch per
//! query row while producing the same output to within 1e-6.

use crate::error::{Error, Result};
use crate::tensor::{self, quantize, Tensor};

/// Key-block width used when callers do not choose one.
pub const DEFAULT_BLOCK: usize = 32;

/// Inputs of a fused attention-JVP call: primal `Q`, `K`, `V` of shape
/// `[n, d]` and their tangents of identical shape.
#[derive(Debug, Clone)]
pub struct AttentionOperands {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub tq: Tensor,
    pub tk: Tensor,
    pub tv: Tensor,
}

impl AttentionOperands {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, tq: Tensor, tk: Tensor, tv: Tensor) -> Result<Self> {
        let ops = Self { q, k, v, tq, tk, tv };
        ops.validate()?;
        Ok(ops)
    }

    /// Zero tangents on all three operands.
    pub fn zero_tangent(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let (tq, tk, tv) = (
            Tensor::zeros(q.shape()),
            Tensor::zeros(k.shape()),
            Tensor::zeros(v.shape()),
        );
        Self::new(q, k, v, tq, tk, tv)
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let (n, d) = check_attention_shapes(&self.q, &self.k, &self.v)?;
        for (t, p) in [(&self.tq, &self.q), (&self.tk, &self.k), (&self.tv, &self.v)] {
            p.check_same_shape(t, "attention_jvp tangent")?;
        }
        Ok((n, d))
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("tq", &self.tq),
            ("tk", &self.tk),
            ("tv", &self.tv),
        ] {
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "attention_jvp", context: Some(name.into()) });
            }
        }
        Ok(())
    }
}

/// Output of a fused call: `O` and its tangent `tO`, both `[n, d]`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Tensor,
    pub tangent: Tensor,
}

/// Scratch accounting for the blocked kernel, in number of f64 slots.
#[derive(Debug, Clone, Copy)]
pub struct BlockStats {
    pub peak_scratch: usize,
}

fn check_attention_shapes(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    if q.shape().len() != 2 {
        return Err(Error::RankMismatch { op: "attention", expected: 2, shape: q.shape().to_vec() });
    }
    q.check_same_shape(k, "attention q/k")?;
    k.check_same_shape(v, "attention k/v")?;
    let (n, d) = (q.rows(), q.cols());
    if n == 0 || d == 0 {
        return Err(Error::Malformed {
            what: "attention",
            detail: format!("degenerate shape [{n}, {d}]"),
        });
    }
    Ok((n, d))
}

/// Plain attention forward pass: `softmax(Q K^T / sqrt(d)) V`.
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, d) = check_attention_shapes(q, k, v)?;
    let kt = tensor::transpose(k)?;
    let s = tensor::scale(&tensor::matmul(q, &kt)?, 1.0 / (d as f64).sqrt());
    let p = tensor::softmax_rows(&s)?;
    tensor::matmul(&p, v)
}

/// Tangent of the pre-softmax scores: `tS = (tQ K^T + Q tK^T) / sqrt(d)`.
pub fn score_tangent(q: &Tensor, k: &Tensor, tq: &Tensor, tk: &Tensor) -> Result<Tensor> {
    q.check_same_shape(tq, "score_tangent q")?;
    k.check_same_shape(tk, "score_tangent k")?;
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op: "score_tangent",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let kt = tensor::transpose(k)?;
    let tkt = tensor::transpose(tk)?;
    let a = tensor::matmul(tq, &kt)?;
    let b = tensor::matmul(q, &tkt)?;
    Ok(tensor::scale(&tensor::add(&a, &b)?, 1.0 / (q.cols() as f64).sqrt()))
}

/// Scale row `i` of `a` by `r[i]` (used for the `diag(rowsum(H)) O` term).
fn scale_rows(a: &Tensor, r: &[f64]) -> Tensor {
    let w = a.cols();
    let mut data = Vec::with_capacity(a.numel());
    for (i, row) in a.data().chunks_exact(w).enumerate() {
        data.extend(row.iter().map(|&x| quantize(x * r[i])));
    }
    Tensor::raw(a.shape().to_vec(), data)
}

fn row_sums(a: &Tensor) -> Vec<f64> {
    a.data()
        .chunks_exact(a.cols())
        .map(|row| quantize(row.iter().sum()))
        .collect()
}

/// Reference JVP with `P` and `H` materialised.
pub fn attention_jvp_reference(ops: &AttentionOperands) -> Result<AttentionOutput> {
    let (_, d) = ops.validate()?;
    ops.check_finite()?;
    let kt = tensor::transpose(&ops.k)?;
    let s = tensor::scale(&tensor::matmul(&ops.q, &kt)?, 1.0 / (d as f64).sqrt());
    let p = tensor::softmax_rows(&s)?;
    let o = tensor::matmul(&p, &ops.v)?;

    let ts = score_tangent(&ops.q, &ops.k, &ops.tq, &ops.tk)?;
    let h = tensor::mul(&p, &ts)?;
    let p_tv = tensor::matmul(&p, &ops.tv)?;
    let h_v = tensor::matmul(&h, &ops.v)?;
    let sum = tensor::add(&p_tv, &h_v)?;
    let rs = row_sums(&h);
    let tangent = tensor::sub(&sum, &scale_rows(&o, &rs))?;
    Ok(AttentionOutput { output: o, tangent })
}

/// Blocked JVP streaming over key/value blocks. `block` is clamped to `n`;
/// a clamped call takes an exact single-tile path whose summation order
/// matches the reference.
pub fn attention_jvp_blocked(ops: &AttentionOperands, block: usize) -> Result<AttentionOutput> {
    attention_jvp_blocked_with_stats(ops, block).map(|(out, _)| out)
}

/// Same as [`attention_jvp_blocked`], also reporting peak scratch usage.
pub fn attention_jvp_blocked_with_stats(
    ops: &AttentionOperands,
    block: usize,
) -> Result<(AttentionOutput, BlockStats)> {
    let (n, d) = ops.validate()?;
    ops.check_finite()?;
    if block == 0 {
        return Err(Error::Malformed { what: "attention block", detail: "block must be >= 1".into() });
    }
    let b = block.min(n);
    let kappa = 1.0 / (d as f64).sqrt();

    let (q, k, v) = (ops.q.data(), ops.k.data(), ops.v.data());
    let (tq, tk, tv) = (ops.tq.data(), ops.tk.data(), ops.tv.data());

    let mut out = vec![0.0f64; n * d];
    let mut tout = vec![0.0f64; n * d];

    // Scratch shared across rows: two score buffers plus two accumulators.
    let mut s_buf = vec![0.0f64; b];
    let mut ts_buf = vec![0.0f64; b];
    let mut acc_o = vec![0.0f64; d];
    let mut acc_t = vec![0.0f64; d];
    let stats = BlockStats { peak_scratch: 2 * b + 2 * d };

    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let tqi = &tq[i * d..(i + 1) * d];

        if b == n {
            // Single tile: reproduce the reference summation order exactly.
            for j in 0..n {
                let kj = &k[j * d..(j + 1) * d];
                let tkj = &tk[j * d..(j + 1) * d];
                let mut s = 0.0;
                let mut ta = 0.0;
                let mut tb = 0.0;
                for c in 0..d {
                    s += qi[c] * kj[c];
                    ta += tqi[c] * kj[c];
                    tb += qi[c] * tkj[c];
                }
                s_buf[j] = quantize(quantize(s) * kappa);
                ts_buf[j] = quantize(quantize(quantize(ta) + quantize(tb)) * kappa);
            }
            let m = s_buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut l = 0.0;
            for sj in s_buf.iter_mut() {
                *sj = (*sj - m).exp();
                l += *sj;
            }
            acc_o.fill(0.0);
            let oi = &mut out[i * d..(i + 1) * d];
            for j in 0..n {
                let pj = quantize(s_buf[j] / l);
                s_buf[j] = pj;
                let vj = &v[j * d..(j + 1) * d];
                for c in 0..d {
                    acc_o[c] += pj * vj[c];
                }
            }
            for c in 0..d {
                oi[c] = quantize(acc_o[c]);
            }
            // tO row: (P tV + H V) - rowsum(H) * O with H = P .* tS.
            acc_o.fill(0.0);
            acc_t.fill(0.0);
            let mut rs = 0.0;
            for j in 0..n {
                let pj = s_buf[j];
                let hj = quantize(pj * ts_buf[j]);
                rs += hj;
                let vj = &v[j * d..(j + 1) * d];
                let tvj = &tv[j * d..(j + 1) * d];
                for c in 0..d {
                    acc_o[c] += pj * tvj[c];
                    acc_t[c] += hj * vj[c];
                }
            }
            rs = quantize(rs);
            let ti = &mut tout[i * d..(i + 1) * d];
            for c in 0..d {
                let sum = quantize(quantize(acc_o[c]) + quantize(acc_t[c]));
                ti[c] = quantize(sum - quantize(oi[c] * rs));
            }
            continue;
        }

        // Streaming path: running row max `m`, running normaliser `l`,
        // running rowsum(H) numerator `r`, accumulators for O and for
        // (P tV + H V). New blocks rescale prior sums by exp(m_old - m_new).
        let mut m = f64::NEG_INFINITY;
        let mut l = 0.0;
        let mut r = 0.0;
        acc_o.fill(0.0);
        acc_t.fill(0.0);

        let mut jb = 0;
        while jb < n {
            let je = (jb + b).min(n);
            let mut mb = f64::NEG_INFINITY;
            for (slot, j) in (jb..je).enumerate() {
                let kj = &k[j * d..(j + 1) * d];
                let tkj = &tk[j * d..(j + 1) * d];
                // Two-way unrolled fused dots: score and its tangent share
                // the loads of q, tq, k, tk.
                let (mut s0, mut s1) = (0.0, 0.0);
                let (mut a0, mut a1) = (0.0, 0.0);
                let mut c = 0;
                while c + 2 <= d {
                    s0 += qi[c] * kj[c];
                    s1 += qi[c + 1] * kj[c + 1];
                    a0 += tqi[c] * kj[c] + qi[c] * tkj[c];
                    a1 += tqi[c + 1] * kj[c + 1] + qi[c + 1] * tkj[c + 1];
                    c += 2;
                }
                if c < d {
                    s0 += qi[c] * kj[c];
                    a0 += tqi[c] * kj[c] + qi[c] * tkj[c];
                }
                let s = (s0 + s1) * kappa;
                s_buf[slot] = s;
                ts_buf[slot] = (a0 + a1) * kappa;
                mb = mb.max(s);
            }
            let m_new = m.max(mb);
            if m_new > m && l > 0.0 {
                let gamma = (m - m_new).exp();
                l *= gamma;
                r *= gamma;
                for c in 0..d {
                    acc_o[c] *= gamma;
                    acc_t[c] *= gamma;
                }
            }
            m = m_new;
            for (slot, j) in (jb..je).enumerate() {
                let e = (s_buf[slot] - m).exp();
                let e2 = e * ts_buf[slot];
                l += e;
                r += e2;
                let vj = &v[j * d..(j + 1) * d];
                let tvj = &tv[j * d..(j + 1) * d];
                for c in 0..d {
                    acc_o[c] += e * vj[c];
                    acc_t[c] += e * tvj[c] + e2 * vj[c];
                }
            }
            jb = je;
        }

        let rho = r / l;
        let oi = &mut out[i * d..(i + 1) * d];
        let ti = &mut tout[i * d..(i + 1) * d];
        for c in 0..d {
            let o = acc_o[c] / l;
            oi[c] = quantize(o);
            ti[c] = quantize(acc_t[c] / l - rho * o);
        }
    }

    Ok((
        AttentionOutput {
            output: Tensor::raw(vec![n, d], out),
            tangent: Tensor::raw(vec![n, d], tout),
        },
        stats,
    ))
}

/// Reverse rule for the fused attention primitive.
pub(crate) fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    grad_o: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, d) = check_attention_shapes(q, k, v)?;
    let kappa = 1.0 / (d as f64).sqrt();
    let kt = tensor::transpose(k)?;
    let s = tensor::scale(&tensor::matmul(q, &kt)?, kappa);
    let p = tensor::softmax_rows(&s)?;

    let dv = tensor::matmul(&tensor::transpose(&p)?, grad_o)?;
    let dp = tensor::matmul(grad_o, &tensor::transpose(v)?)?;
    let ds = crate::tensor::softmax_grad_rows(&p, &dp);
    let dq = tensor::scale(&tensor::matmul(&ds, k)?, kappa);
    let dk = tensor::scale(&tensor::matmul(&tensor::transpose(&ds)?, q)?, kappa);
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DeterministicRng;
    use crate::tensor::{max_abs_diff, rel_err, with_precision, Precision};

    fn operands(seed: u64, n: usize, d: usize) -> AttentionOperands {
        let mut rng = DeterministicRng::seed_from(seed);
        AttentionOperands::new(
            rng.normal_tensor(&[n, d]),
            rng.normal_tensor(&[n, d]),
            rng.normal_tensor(&[n, d]),
            rng.normal_tensor(&[n, d]),
            rng.normal_tensor(&[n, d]),
            rng.normal_tensor(&[n, d]),
        )
        .unwrap()
    }

    #[test]
    fn forward_single_key_returns_value_row() {
        let mut rng = DeterministicRng::seed_from(1);
        let q = rng.normal_tensor(&[1, 4]);
        let k = rng.normal_tensor(&[1, 4]);
        let v = rng.normal_tensor(&[1, 4]);
        let o = attention_forward(&q, &k, &v).unwrap();
        assert!(max_abs_diff(&o, &v) <= 1e-12);
    }

    #[test]
    fn forward_identical_keys_average_values() {
        let mut rng = DeterministicRng::seed_from(2);
        let q = rng.normal_tensor(&[3, 4]);
        let krow = rng.normal_tensor(&[1, 4]);
        let mut kdata = Vec::new();
        for _ in 0..3 {
            kdata.extend_from_slice(krow.data());
        }
        let k = Tensor::from_vec(vec![3, 4], kdata).unwrap();
        let v = rng.normal_tensor(&[3, 4]);
        let o = attention_forward(&q, &k, &v).unwrap();
        for row in o.data().chunks_exact(4) {
            for (c, x) in row.iter().enumerate() {
                let mean = (v.data()[c] + v.data()[4 + c] + v.data()[8 + c]) / 3.0;
                assert!((x - mean).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn forward_matches_dense_composition_oracle() {
        with_precision(Precision::Double, || {
            let ops = operands(3, 8, 4);
            let got = attention_forward(&ops.q, &ops.k, &ops.v).unwrap();
            // Dense oracle composed by hand.
            let (n, d) = (8, 4);
            let kappa = 1.0 / (d as f64).sqrt();
            let mut want = vec![0.0; n * d];
            for i in 0..n {
                let mut s = vec![0.0; n];
                for j in 0..n {
                    for c in 0..d {
                        s[j] += ops.q.data()[i * d + c] * ops.k.data()[j * d + c];
                    }
                    s[j] *= kappa;
                }
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..n {
                    for c in 0..d {
                        want[i * d + c] += exps[j] / sum * ops.v.data()[j * d + c];
                    }
                }
            }
            let want = Tensor::from_vec(vec![n, d], want).unwrap();
            assert!(rel_err(&got, &want) <= 1e-6);
        });
    }

    #[test]
    fn score_tangent_zero_and_one_sided() {
        let mut rng = DeterministicRng::seed_from(4);
        let q = rng.normal_tensor(&[3, 4]);
        let k = rng.normal_tensor(&[3, 4]);
        let z = Tensor::zeros(&[3, 4]);
        let ts = score_tangent(&q, &k, &z, &z).unwrap();
        assert_eq!(ts, Tensor::zeros(&[3, 3]));

        let tq = rng.normal_tensor(&[3, 4]);
        let ts = score_tangent(&q, &k, &tq, &z).unwrap();
        let want = crate::tensor::scale(
            &crate::tensor::matmul(&tq, &crate::tensor::transpose(&k).unwrap()).unwrap(),
            0.5,
        );
        assert!(max_abs_diff(&ts, &want) <= 1e-6);
    }

    #[test]
    fn score_tangent_matches_finite_differences() {
        with_precision(Precision::Double, || {
            let ops = operands(5, 6, 4);
            let got = score_tangent(&ops.q, &ops.k, &ops.tq, &ops.tk).unwrap();
            let kappa = 1.0 / 2.0;
            let h = 1e-5;
            let score = |eps: f64| {
                let q = crate::tensor::add(&ops.q, &crate::tensor::scale(&ops.tq, eps)).unwrap();
                let k = crate::tensor::add(&ops.k, &crate::tensor::scale(&ops.tk, eps)).unwrap();
                crate::tensor::scale(
                    &crate::tensor::matmul(&q, &crate::tensor::transpose(&k).unwrap()).unwrap(),
                    kappa,
                )
            };
            let fd = crate::tensor::scale(
                &crate::tensor::sub(&score(h), &score(-h)).unwrap(),
                1.0 / (2.0 * h),
            );
            assert!(rel_err(&got, &fd) <= 1e-4, "rel err {}", rel_err(&got, &fd));
        });
    }

    #[test]
    fn reference_zero_tangents_give_zero() {
        let mut rng = DeterministicRng::seed_from(6);
        let ops = AttentionOperands::zero_tangent(
            rng.normal_tensor(&[5, 3]),
            rng.normal_tensor(&[5, 3]),
            rng.normal_tensor(&[5, 3]),
        )
        .unwrap();
        let out = attention_jvp_reference(&ops).unwrap();
        assert_eq!(out.tangent, Tensor::zeros(&[5, 3]));
    }

    #[test]
    fn reference_single_key_tangent_is_tv() {
        let ops = operands(7, 1, 4);
        let out = attention_jvp_reference(&ops).unwrap();
        assert!(max_abs_diff(&out.output, &ops.v) <= 1e-12);
        assert!(max_abs_diff(&out.tangent, &ops.tv) <= 1e-9);
    }

    #[test]
    fn reference_matches_joint_finite_differences() {
        with_precision(Precision::Double, || {
            let ops = operands(8, 16, 8);
            let out = attention_jvp_reference(&ops).unwrap();
            let h = 1e-5;
            let shifted = |eps: f64| {
                let q = crate::tensor::add(&ops.q, &crate::tensor::scale(&ops.tq, eps)).unwrap();
                let k = crate::tensor::add(&ops.k, &crate::tensor::scale(&ops.tk, eps)).unwrap();
                let v = crate::tensor::add(&ops.v, &crate::tensor::scale(&ops.tv, eps)).unwrap();
                attention_forward(&q, &k, &v).unwrap()
            };
            let fd = crate::tensor::scale(
                &crate::tensor::sub(&shifted(h), &shifted(-h)).unwrap(),
                1.0 / (2.0 * h),
            );
            let e = rel_err(&out.tangent, &fd);
            assert!(e <= 1e-4, "rel err {e}");
        });
    }

    #[test]
    fn reference_rejects_nan_operand() {
        let mut ops = operands(9, 3, 2);
        ops.tk.data_mut()[0] = f64::NAN;
        assert!(matches!(
            attention_jvp_reference(&ops),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn blocked_matches_reference_for_all_block_sizes() {
        for seed in 0..5u64 {
            let ops = operands(100 + seed, 16, 8);
            let want = attention_jvp_reference(&ops).unwrap();
            for block in [1usize, 2, 5, 8, 16, 64] {
                let got = attention_jvp_blocked(&ops, block).unwrap();
                assert!(max_abs_diff(&got.output, &want.output) <= 1e-6);
                assert!(
                    max_abs_diff(&got.tangent, &want.tangent) <= 1e-6,
                    "seed {seed} block {block}: {}",
                    max_abs_diff(&got.tangent, &want.tangent)
                );
            }
        }
    }

    #[test]
    fn blocked_degenerate_tile_is_bitwise_reference() {
        with_precision(Precision::Double, || {
            let ops = operands(11, 12, 4);
            let want = attention_jvp_reference(&ops).unwrap();
            // block == n, and block > n clamped, both take the exact path.
            for block in [12usize, 40] {
                let got = attention_jvp_blocked(&ops, block).unwrap();
                assert_eq!(got.output.data(), want.output.data());
                assert_eq!(got.tangent.data(), want.tangent.data());
            }
        });
    }

    #[test]
    fn blocked_scratch_stays_small() {
        let ops = operands(12, 256, 32);
        let (_, stats) = attention_jvp_blocked_with_stats(&ops, 32).unwrap();
        assert!(
            stats.peak_scratch < 256 * 256 / 4,
            "scratch {} not below n^2/4",
            stats.peak_scratch
        );
    }

    #[test]
    fn jvp_is_linear_in_tangents() {
        let base = operands(13, 10, 6);
        let mut rng = DeterministicRng::seed_from(14);
        let other = (
            rng.normal_tensor(&[10, 6]),
            rng.normal_tensor(&[10, 6]),
            rng.normal_tensor(&[10, 6]),
        );
        let (a, b) = (0.7, -1.3);
        let combined = AttentionOperands::new(
            base.q.clone(),
            base.k.clone(),
            base.v.clone(),
            crate::tensor::add(&crate::tensor::scale(&base.tq, a), &crate::tensor::scale(&other.0, b)).unwrap(),
            crate::tensor::add(&crate::tensor::scale(&base.tk, a), &crate::tensor::scale(&other.1, b)).unwrap(),
            crate::tensor::add(&crate::tensor::scale(&base.tv, a), &crate::tensor::scale(&other.2, b)).unwrap(),
        )
        .unwrap();
        let other_ops = AttentionOperands::new(
            base.q.clone(),
            base.k.clone(),
            base.v.clone(),
            other.0,
            other.1,
            other.2,
        )
        .unwrap();
        let t_base = attention_jvp_reference(&base).unwrap().tangent;
        let t_other = attention_jvp_reference(&other_ops).unwrap().tangent;
        let t_comb = attention_jvp_reference(&combined).unwrap().tangent;
        let want =
            crate::tensor::add(&crate::tensor::scale(&t_base, a), &crate::tensor::scale(&t_other, b))
                .unwrap();
        assert!(max_abs_diff(&t_comb, &want) <= 1e-6);
    }

    #[test]
    fn softmax_tangent_identity_holds() {
        // H V - diag(rowsum(H)) O  ==  (P .* tS - diag(rowsum(P .* tS)) P) V
        let ops = operands(15, 9, 5);
        let kt = crate::tensor::transpose(&ops.k).unwrap();
        let s = crate::tensor::scale(&crate::tensor::matmul(&ops.q, &kt).unwrap(), 1.0 / 5f64.sqrt());
        let p = crate::tensor::softmax_rows(&s).unwrap();
        let o = crate::tensor::matmul(&p, &ops.v).unwrap();
        let ts = score_tangent(&ops.q, &ops.k, &ops.tq, &ops.tk).unwrap();
        let h = crate::tensor::mul(&p, &ts).unwrap();
        let rs = row_sums(&h);

        let lhs = crate::tensor::sub(
            &crate::tensor::matmul(&h, &ops.v).unwrap(),
            &scale_rows(&o, &rs),
        )
        .unwrap();

        let dp = crate::tensor::sub(&h, &scale_rows(&p, &rs)).unwrap();
        let rhs = crate::tensor::matmul(&dp, &ops.v).unwrap();
        assert!(max_abs_diff(&lhs, &rhs) <= 1e-6);

        // Probability conservation: the softmax tangent dP sums to zero per row.
        for row in dp.data().chunks_exact(9) {
            assert!(row.iter().sum::<f64>().abs() <= 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        with_precision(Precision::Double, || {
            let mut rng = DeterministicRng::seed_from(16);
            let q = rng.normal_tensor(&[5, 3]);
            let k = rng.normal_tensor(&[5, 3]);
            let v = rng.normal_tensor(&[5, 3]);
            let g = rng.normal_tensor(&[5, 3]);
            let (dq, dk, dv) = attention_backward(&q, &k, &v, &g).unwrap();
            let h = 1e-5;
            // d/deps <g, attention(q + eps*e_i, ...)> for a few probes.
            let probe = |which: usize, idx: usize, delta: f64| -> f64 {
                let mut qq = q.clone();
                let mut kk = k.clone();
                let mut vv = v.clone();
                match which {
                    0 => qq.data_mut()[idx] += delta,
                    1 => kk.data_mut()[idx] += delta,
                    _ => vv.data_mut()[idx] += delta,
                }
                let o = attention_forward(&qq, &kk, &vv).unwrap();
                o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            for which in 0..3 {
                let analytic = match which {
                    0 => &dq,
                    1 => &dk,
                    _ => &dv,
                };
                for idx in [0usize, 7, 14] {
                    let fd = (probe(which, idx, h) - probe(which, idx, -h)) / (2.0 * h);
                    let a = analytic.data()[idx];
                    assert!(
                        (a - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                        "which {which} idx {idx}: {a} vs {fd}"
                    );
                }
            }
        });
    }
}
