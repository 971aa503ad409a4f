//! Diffusion noise schedules.
//!
//! A schedule stores the cumulative signal coefficients `alpha_1..alpha_T`
//! (products of the per-step `1 - beta`) together with the variance
//! magnitude `mu` that scales the DDIM sampling sigma.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Inclusive range of the linear beta ramp used by [`NoiseSchedule::linear_beta`].
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Cumulative noise schedule plus sampling variance magnitude.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<S> {
    alphas: Vec<S>,
    variance_magnitude: S,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Build from explicit cumulative alphas.
    ///
    /// `alphas[i]` is the coefficient for timestep `i + 1`; `alpha_0 = 1` is
    /// implicit. Alphas must be strictly decreasing and inside `(0, 1)`.
    pub fn from_alphas(alphas: Vec<S>, variance_magnitude: S) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if variance_magnitude < S::zero() || !variance_magnitude.is_finite() {
            return Err(Error::invalid(format!(
                "variance magnitude must be finite and >= 0, got {variance_magnitude}"
            )));
        }
        let mut prev = S::one();
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > S::zero() && a < S::one()) {
                return Err(Error::invalid(format!(
                    "alpha_{} = {} outside (0, 1)",
                    i + 1,
                    a
                )));
            }
            if a >= prev {
                return Err(Error::invalid(format!(
                    "alphas must be strictly decreasing (alpha_{} = {} >= alpha_{} = {})",
                    i + 1,
                    a,
                    i,
                    prev
                )));
            }
            prev = a;
        }
        Ok(Self {
            alphas,
            variance_magnitude,
        })
    }

    /// Linear beta ramp over exactly `num_steps` steps.
    pub fn linear_beta(num_steps: usize, variance_magnitude: S) -> Result<Self> {
        Self::subsampled_linear_beta(num_steps, num_steps, variance_magnitude)
    }

    /// `num_steps` evenly strided points of a `base_steps`-long linear beta
    /// ramp.
    ///
    /// This is what a short sampling run over a long training schedule sees:
    /// with the default 1000-step base, `alpha_T` is ~5e-5 for any stride, so
    /// the terminal latent is essentially pure noise even at 20 or 50 steps.
    pub fn subsampled_linear_beta(
        base_steps: usize,
        num_steps: usize,
        variance_magnitude: S,
    ) -> Result<Self> {
        if num_steps == 0 || base_steps < num_steps {
            return Err(Error::invalid(format!(
                "need 1 <= num_steps <= base_steps, got num_steps={num_steps} base_steps={base_steps}"
            )));
        }
        // Cumulative products computed in f64 then narrowed.
        let mut cumprod = Vec::with_capacity(base_steps);
        let mut acc = 1.0f64;
        for i in 0..base_steps {
            let frac = if base_steps == 1 {
                0.0
            } else {
                i as f64 / (base_steps - 1) as f64
            };
            let beta = BETA_START + frac * (BETA_END - BETA_START);
            acc *= 1.0 - beta;
            cumprod.push(acc);
        }
        let alphas = (1..=num_steps)
            .map(|t| {
                let idx = t * base_steps / num_steps - 1;
                S::from_real(cumprod[idx])
            })
            .collect();
        Self::from_alphas(alphas, variance_magnitude)
    }

    /// Number of steps `T`.
    pub fn num_steps(&self) -> usize {
        self.alphas.len()
    }

    /// Variance magnitude `mu`.
    pub fn variance_magnitude(&self) -> S {
        self.variance_magnitude
    }

    /// Copy of this schedule with a different variance magnitude.
    pub fn with_variance_magnitude(&self, mu: S) -> Result<Self> {
        Self::from_alphas(self.alphas.clone(), mu)
    }

    /// Cumulative alpha at `t`, with the `alpha_0 = 1` boundary.
    ///
    /// Panics if `t > T`; use [`NoiseSchedule::check_step`] first for
    /// caller-supplied timesteps.
    pub fn alpha(&self, t: usize) -> S {
        if t == 0 {
            S::one()
        } else {
            self.alphas[t - 1]
        }
    }

    /// Error unless `1 <= t <= T`.
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// DDIM sampling sigma at step `t`:
    /// `mu * sqrt((1 - alpha_{t-1}) / (1 - alpha_t)) * sqrt(1 - alpha_t / alpha_{t-1})`.
    pub fn sigma(&self, t: usize) -> Result<S> {
        self.check_step(t)?;
        let a_prev = self.alpha(t - 1);
        let a_cur = self.alpha(t);
        let ratio = (S::one() - a_prev) / (S::one() - a_cur);
        let step = S::one() - a_cur / a_prev;
        // Both factors are >= 0 for a strictly decreasing schedule; guard
        // against a tiny negative from rounding.
        let sigma = self.variance_magnitude * ratio.max(S::zero()).sqrt() * step.max(S::zero()).sqrt();
        Ok(sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_non_decreasing_alphas() {
        assert!(NoiseSchedule::from_alphas(vec![0.5f64, 0.5], 1.0).is_err());
        assert!(NoiseSchedule::from_alphas(vec![0.5f64, 0.6], 1.0).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0f64], 1.0).is_err());
        assert!(NoiseSchedule::from_alphas(Vec::<f64>::new(), 1.0).is_err());
    }

    #[test]
    fn alpha_zero_is_one() {
        let s = NoiseSchedule::from_alphas(vec![0.9f64, 0.8], 1.0).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.alpha(1), 0.9);
        assert_eq!(s.alpha(2), 0.8);
    }

    #[test]
    fn sigma_zero_magnitude() {
        let s = NoiseSchedule::from_alphas(vec![0.9f64, 0.8], 0.0).unwrap();
        for t in 1..=2 {
            assert_eq!(s.sigma(t).unwrap(), 0.0);
        }
    }

    #[test]
    fn sigma_hand_value() {
        // mu = 1, alpha_{t-1} = 0.9, alpha_t = 0.8:
        // sqrt(0.1 / 0.2) * sqrt(1 - 0.8 / 0.9) = 0.2357022603955158
        let s = NoiseSchedule::from_alphas(vec![0.9f64, 0.8], 1.0).unwrap();
        assert_relative_eq!(s.sigma(2).unwrap(), 0.2357022603955158, max_relative = 1e-12);
    }

    #[test]
    fn sigma_at_first_step_is_zero() {
        // alpha_0 = 1 makes the first factor vanish regardless of mu.
        let s = NoiseSchedule::from_alphas(vec![0.9f64, 0.8], 1.0).unwrap();
        assert_eq!(s.sigma(1).unwrap(), 0.0);
    }

    #[test]
    fn sigma_rejects_out_of_range() {
        let s = NoiseSchedule::from_alphas(vec![0.9f64], 1.0).unwrap();
        assert!(s.sigma(0).is_err());
        assert!(s.sigma(2).is_err());
    }

    #[test]
    fn sigma_nonnegative_on_linear_schedule() {
        let s: NoiseSchedule<f64> = NoiseSchedule::linear_beta(50, 1.0).unwrap();
        for t in 1..=50 {
            assert!(s.sigma(t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn subsampled_schedule_reaches_pure_noise() {
        let s: NoiseSchedule<f64> = NoiseSchedule::subsampled_linear_beta(1000, 50, 1.0).unwrap();
        assert_eq!(s.num_steps(), 50);
        assert!(s.alpha(50) < 1e-4, "alpha_T = {}", s.alpha(50));
        // Full-length subsample is the base schedule itself.
        let base: NoiseSchedule<f64> = NoiseSchedule::linear_beta(1000, 1.0).unwrap();
        assert_eq!(base.alpha(1000), s.alpha(50));
    }
}
