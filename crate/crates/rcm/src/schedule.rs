//! Noise schedule over `t in [0, T]`.

use crate::error::{Error, Result};

/// The linear (rectified) schedule `alpha(t) = 1 - t/T`, `sigma(t) = t/T`:
/// clean data at `t = 0`, pure noise at `t = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub horizon: f64,
}

impl NoiseSchedule {
    pub fn linear(horizon: f64) -> Self {
        Self { horizon }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t / self.horizon
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t / self.horizon
    }

    pub fn dalpha(&self, _t: f64) -> f64 {
        -1.0 / self.horizon
    }

    pub fn dsigma(&self, _t: f64) -> f64 {
        1.0 / self.horizon
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }
}

/// Build a schedule by name; only `linear` exists.
pub fn make_schedule(kind: &str, horizon: f64) -> Result<NoiseSchedule> {
    match kind {
        "linear" => Ok(NoiseSchedule::linear(horizon)),
        other => Err(Error::UnknownSchedule(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values() {
        let s = make_schedule("linear", 1.0).unwrap();
        assert_eq!((s.alpha(0.0), s.sigma(0.0)), (1.0, 0.0));
        assert_eq!((s.alpha(1.0), s.sigma(1.0)), (0.0, 1.0));
        assert_eq!((s.alpha(0.5), s.sigma(0.5)), (0.5, 0.5));
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert!(matches!(make_schedule("cosine", 1.0), Err(Error::UnknownSchedule(_))));
    }

    #[test]
    fn time_range_check() {
        let s = NoiseSchedule::linear(1.0);
        assert!(s.check_time(0.0).is_ok());
        assert!(s.check_time(1.0).is_ok());
        assert!(s.check_time(-0.1).is_err());
        assert!(s.check_time(1.1).is_err());
    }
}
