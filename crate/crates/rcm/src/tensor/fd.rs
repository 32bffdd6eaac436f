//! Central finite differences, used as independent oracles for both
//! differentiation modes.

use super::{ops, ParamSet, Tensor};
use crate::error::Result;

/// Central difference `(f(x + h v) - f(x - h v)) / (2 h)`.
pub fn finite_diff_directional<F>(f: F, x: &Tensor, v: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let plus = f(&ops::add(x, &ops::scale(v, h))?)?;
    let minus = f(&ops::sub(x, &ops::scale(v, h))?)?;
    Ok(ops::scale(&ops::sub(&plus, &minus)?, 1.0 / (2.0 * h)))
}

/// Elementwise central-difference gradient of a scalar function of a
/// parameter set.
pub fn finite_diff_grad<F>(f: F, params: &ParamSet, h: f64) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let base = params.flatten();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&params.unflatten(&plus)?)?;
        let fm = f(&params.unflatten(&minus)?)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    params.unflatten(&grad)
}
