//! Adaptive-moment optimiser with decoupled weight decay, plus global
//! gradient-norm clipping.

use crate::error::Result;
use crate::tensor::{quantize, ParamSet};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update with the given learning rate. Gradients are consumed as-is;
    /// clip beforehand if needed.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let m = self.m.get_mut(name)?;
            for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = quantize(self.beta1 * *mv + (1.0 - self.beta1) * gv);
            }
            let v = self.v.get_mut(name)?;
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = quantize(self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            }
        }
        for (name, p) in params.iter_mut() {
            let m = self.m.get(name)?;
            let v = self.v.get(name)?;
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv = quantize(*pv - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv));
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn state(&self) -> (&ParamSet, &ParamSet, u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(&mut self, m: ParamSet, v: ParamSet, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

/// Scale gradients so their global norm is at most `max_norm`.
/// Returns the clipped gradients and the pre-clip norm.
pub fn clip_global_norm(grads: &ParamSet, max_norm: f64) -> (ParamSet, f64) {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        (grads.scale(max_norm / norm), norm)
    } else {
        (grads.clone(), norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DeterministicRng;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_converges() {
        // Minimise ||p - c||^2; AdamW should walk p towards c.
        let mut rng = DeterministicRng::seed_from(1);
        let target = rng.normal_tensor(&[2, 3]);
        let mut params = ParamSet::new();
        params.insert("p", Tensor::zeros(&[2, 3]));
        let mut opt = AdamW::new(&params, 0.0);
        for _ in 0..600 {
            let p = params.get("p").unwrap();
            let grad = crate::tensor::scale(&crate::tensor::sub(p, &target).unwrap(), 2.0);
            let mut gs = ParamSet::new();
            gs.insert("p", grad);
            opt.step(&mut params, &gs, 0.05).unwrap();
        }
        let err = crate::tensor::max_abs_diff(params.get("p").unwrap(), &target);
        assert!(err < 1e-2, "residual {err}");
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut gs = ParamSet::new();
        gs.insert("a", Tensor::full(&[2, 2], 3.0));
        gs.insert("b", Tensor::full(&[1, 2], -4.0));
        let pre = gs.global_norm();
        let (clipped, reported) = clip_global_norm(&gs, 1.0);
        assert_eq!(pre, reported);
        assert!(clipped.global_norm() <= 1.0 + 1e-6);
        // Under the threshold nothing changes.
        let (same, _) = clip_global_norm(&clipped, 10.0);
        assert_eq!(same.flatten(), clipped.flatten());
    }
}
