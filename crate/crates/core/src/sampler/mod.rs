//! DDIM-family sampling with a per-pixel variance field.
//!
//! The reverse update here generalizes deterministic DDIM: the scalar sigma
//! of a stochastic sampler becomes an `H x W` field, so individual pixels can
//! be resampled (sigma = sigma_t) while the rest follow the deterministic
//! trajectory (sigma = 0). Together with a recorded [`NoiseTrace`] this makes
//! a whole sampling run replayable and — via
//! [`extract_consistent_noise`] — invertible around a given clean image.

mod invert;

pub use invert::{ddim_invert, extract_consistent_noise, extract_consistent_noise_with, ConsistencyOpts, DenoiseFn};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Absolute slack when validating sigma entries against `sigma_t`.
const SIGMA_BOUND_SLACK: f64 = 1e-9;
/// How far below zero `1 - alpha_{t-1} - sigma^2` may fall (from rounding)
/// before it is an error instead of a clamp.
const DIRECTION_CLAMP_TOL: f64 = 1e-9;

/// Per-pixel sampling standard deviations for one reverse step.
///
/// Entries are validated against the schedule's `sigma_t` bound at
/// construction; [`VarianceField::from_binary`] additionally guarantees the
/// binary-gated form (every entry either `0` or exactly `sigma_t`).
#[derive(Debug, Clone)]
pub struct VarianceField<S> {
    values: Array2<S>,
    timestep: usize,
}

impl<S: Scalar> VarianceField<S> {
    /// All-zero field: the fully deterministic step.
    pub fn zero(height: usize, width: usize, timestep: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
            timestep,
        }
    }

    /// Every pixel at the schedule sigma: the fully stochastic step.
    pub fn uniform(
        height: usize,
        width: usize,
        timestep: usize,
        schedule: &NoiseSchedule<S>,
    ) -> Result<Self> {
        let sigma_t = schedule.sigma(timestep)?;
        Ok(Self {
            values: Array2::from_elem((height, width), sigma_t),
            timestep,
        })
    }

    /// `sigma_t` where `mask` is true, `0` elsewhere.
    pub fn from_binary(
        mask: &Array2<bool>,
        timestep: usize,
        schedule: &NoiseSchedule<S>,
    ) -> Result<Self> {
        let sigma_t = schedule.sigma(timestep)?;
        Ok(Self {
            values: mask.mapv(|m| if m { sigma_t } else { S::zero() }),
            timestep,
        })
    }

    /// Arbitrary per-pixel sigmas; entries must lie in `[0, sigma_t]`.
    pub fn from_values(
        values: Array2<S>,
        timestep: usize,
        schedule: &NoiseSchedule<S>,
    ) -> Result<Self> {
        let sigma_t = schedule.sigma(timestep)?.to_real();
        for &v in values.iter() {
            let v = v.to_real();
            if !(v.is_finite() && v >= 0.0 && v <= sigma_t + SIGMA_BOUND_SLACK) {
                return Err(Error::invalid(format!(
                    "variance entry {v} outside [0, {sigma_t}] at timestep {timestep}"
                )));
            }
        }
        Ok(Self { values, timestep })
    }

    pub fn values(&self) -> &Array2<S> {
        &self.values
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Fraction of pixels with a strictly positive sigma.
    pub fn active_fraction(&self) -> f64 {
        let total = self.values.len();
        if total == 0 {
            return 0.0;
        }
        let active = self.values.iter().filter(|v| **v > S::zero()).count();
        active as f64 / total as f64
    }
}

/// One all-zero field per step, matching `schedule.num_steps()`.
pub fn zero_fields<S: Scalar>(
    height: usize,
    width: usize,
    schedule: &NoiseSchedule<S>,
) -> Vec<VarianceField<S>> {
    (1..=schedule.num_steps())
        .map(|t| VarianceField::zero(height, width, t))
        .collect()
}

/// One uniform (full-sigma) field per step.
pub fn uniform_fields<S: Scalar>(
    height: usize,
    width: usize,
    schedule: &NoiseSchedule<S>,
) -> Result<Vec<VarianceField<S>>> {
    (1..=schedule.num_steps())
        .map(|t| VarianceField::uniform(height, width, t, schedule))
        .collect()
}

/// Initial latent plus the per-step noise grids of one sampling run.
///
/// `noise(t)` is the grid added at reverse step `t` (applied when moving from
/// `z_t` to `z_{t-1}`); it only influences pixels whose variance entry is
/// positive at that step.
#[derive(Debug, Clone)]
pub struct NoiseTrace<S> {
    initial: LatentGrid<S>,
    per_step_noise: Vec<LatentGrid<S>>,
    seed: u64,
}

impl<S: Scalar> NoiseTrace<S> {
    /// Assemble from parts, checking shape agreement.
    pub fn new(initial: LatentGrid<S>, per_step_noise: Vec<LatentGrid<S>>, seed: u64) -> Result<Self> {
        if per_step_noise.is_empty() {
            return Err(Error::invalid("noise trace needs at least one step"));
        }
        for g in &per_step_noise {
            initial.check_same_shape(g, "noise trace step")?;
        }
        Ok(Self {
            initial,
            per_step_noise,
            seed,
        })
    }

    /// Draw a fresh trace: the initial grid, then one grid per step, all
    /// i.i.d. standard normal from `seed`.
    pub fn from_seed(
        height: usize,
        width: usize,
        channels: usize,
        num_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("noise trace needs at least one step"));
        }
        let mut rng = rng_from_seed(seed);
        let initial = LatentGrid::standard_normal(height, width, channels, &mut rng);
        let per_step_noise = (0..num_steps)
            .map(|_| LatentGrid::standard_normal(height, width, channels, &mut rng))
            .collect();
        Ok(Self {
            initial,
            per_step_noise,
            seed,
        })
    }

    pub fn initial(&self) -> &LatentGrid<S> {
        &self.initial
    }

    /// Noise grid for reverse step `t` (1-based).
    pub fn noise(&self, t: usize) -> &LatentGrid<S> {
        &self.per_step_noise[t - 1]
    }

    pub fn num_steps(&self) -> usize {
        self.per_step_noise.len()
    }

    /// `(height, width, channels)` of every grid in the trace.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.initial.shape()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Scale `z0` to timestep `t` with the given noise:
/// `sqrt(alpha_t) * z0 + sqrt(1 - alpha_t) * eps`.
///
/// `t = 0` is allowed and returns `z0` unchanged (`alpha_0 = 1`).
pub fn forward_diffuse<S: Scalar>(
    z0: &LatentGrid<S>,
    t: usize,
    eps: &LatentGrid<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<LatentGrid<S>> {
    if t > schedule.num_steps() {
        return Err(Error::invalid(format!(
            "timestep {t} outside 0..={}",
            schedule.num_steps()
        )));
    }
    z0.check_same_shape(eps, "forward diffusion")?;
    let alpha = schedule.alpha(t);
    let signal = alpha.sqrt();
    let noise = (S::one() - alpha).sqrt();
    let data = z0.data() * signal + eps.data() * noise;
    Ok(LatentGrid::from(data))
}

/// The noise-free part of the reverse update at step `t`:
/// `sqrt(alpha_{t-1}/alpha_t) * (z_t - sqrt(1 - alpha_t) * eps_hat)
///  + sqrt(1 - alpha_{t-1} - sigma_ij^2) * eps_hat`.
///
/// Split out so that noise extraction can reproduce the exact arithmetic of
/// [`ddim_step`] bit for bit.
fn deterministic_part<S: Scalar>(
    zt: &LatentGrid<S>,
    eps_hat: &LatentGrid<S>,
    t: usize,
    sigma: &VarianceField<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<Array3<S>> {
    let alpha_prev = schedule.alpha(t - 1);
    let alpha_cur = schedule.alpha(t);
    let scale = (alpha_prev / alpha_cur).sqrt();
    let noise_cur = (S::one() - alpha_cur).sqrt();

    let (h, w, c) = zt.shape();
    let mut out = Array3::zeros((h, w, c));
    let z = zt.data();
    let e = eps_hat.data();
    let mut clamped = 0usize;
    for i in 0..h {
        for j in 0..w {
            let s = sigma.values()[[i, j]];
            let mut dir_sq = S::one() - alpha_prev - s * s;
            if dir_sq < S::zero() {
                if dir_sq.to_real() < -DIRECTION_CLAMP_TOL {
                    return Err(Error::NumericDomain {
                        timestep: t,
                        details: format!(
                            "1 - alpha_{} - sigma^2 = {} at pixel ({i}, {j})",
                            t - 1,
                            dir_sq
                        ),
                    });
                }
                dir_sq = S::zero();
                clamped += 1;
            }
            let dir = dir_sq.sqrt();
            for k in 0..c {
                out[[i, j, k]] = scale * (z[[i, j, k]] - noise_cur * e[[i, j, k]]) + dir * e[[i, j, k]];
            }
        }
    }
    if clamped > 0 {
        log::warn!(
            "clamped 1 - alpha_{} - sigma^2 to zero at {clamped} pixel(s) (|value| <= {DIRECTION_CLAMP_TOL})",
            t - 1
        );
    }
    Ok(out)
}

/// One reverse sampling step `z_t -> z_{t-1}` with per-pixel variance.
///
/// The variance field is broadcast across channels: all channels of a pixel
/// share one sigma entry and, where that entry is positive, the matching
/// pixel of `noise` enters scaled by it. With an all-zero field this is the
/// deterministic DDIM update; with a uniform field it is the fully
/// stochastic one.
pub fn ddim_step<S: Scalar>(
    zt: &LatentGrid<S>,
    eps_hat: &LatentGrid<S>,
    t: usize,
    sigma: &VarianceField<S>,
    noise: &LatentGrid<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<LatentGrid<S>> {
    schedule.check_step(t)?;
    if sigma.timestep() != t {
        return Err(Error::invalid(format!(
            "variance field built for timestep {} used at timestep {t}",
            sigma.timestep()
        )));
    }
    zt.check_same_shape(eps_hat, "reverse step noise prediction")?;
    zt.check_same_shape(noise, "reverse step noise draw")?;
    let (h, w, _) = zt.shape();
    if sigma.shape() != (h, w) {
        return Err(Error::shape(
            "reverse step variance field",
            &[h, w],
            &[sigma.shape().0, sigma.shape().1],
        ));
    }
    // Replays hand in fields straight from a file; re-check the bound.
    let sigma_bound = schedule.sigma(t)?.to_real();
    for &v in sigma.values().iter() {
        let v = v.to_real();
        if !(v.is_finite() && v >= 0.0 && v <= sigma_bound + SIGMA_BOUND_SLACK) {
            return Err(Error::invalid(format!(
                "variance entry {v} outside [0, {sigma_bound}] at timestep {t}"
            )));
        }
    }

    let mut out = deterministic_part(zt, eps_hat, t, sigma, schedule)?;
    let (h, w, c) = zt.shape();
    let n = noise.data();
    for i in 0..h {
        for j in 0..w {
            let s = sigma.values()[[i, j]];
            if s > S::zero() {
                for k in 0..c {
                    out[[i, j, k]] += s * n[[i, j, k]];
                }
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain {
            timestep: t,
            details: "reverse step produced non-finite latent".into(),
        });
    }
    Ok(LatentGrid::from(out))
}

/// Run the full reverse chain from `trace.initial()` down to `z_0`.
///
/// `denoise` must already be bound to its conditioning. `sigma_fields[t - 1]`
/// supplies the variance for step `t`.
pub fn replay_trace<S: Scalar>(
    trace: &NoiseTrace<S>,
    denoise: &impl DenoiseFn<S>,
    schedule: &NoiseSchedule<S>,
    sigma_fields: &[VarianceField<S>],
) -> Result<LatentGrid<S>> {
    let steps = schedule.num_steps();
    if trace.num_steps() != steps {
        return Err(Error::invalid(format!(
            "noise trace has {} steps, schedule has {steps}",
            trace.num_steps()
        )));
    }
    if sigma_fields.len() != steps {
        return Err(Error::invalid(format!(
            "got {} variance fields for {steps} steps",
            sigma_fields.len()
        )));
    }
    let mut z = trace.initial().clone();
    for t in (1..=steps).rev() {
        let eps_hat = denoise.eps(&z, t)?;
        z = ddim_step(&z, &eps_hat, t, &sigma_fields[t - 1], trace.noise(t), schedule)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;

    fn schedule2() -> NoiseSchedule<f64> {
        NoiseSchedule::from_alphas(vec![0.9, 0.8], 1.0).unwrap()
    }

    #[test]
    fn forward_diffuse_at_zero_returns_input() {
        let sched = schedule2();
        let mut rng = rng_from_seed(3);
        let z0 = LatentGrid::standard_normal(4, 4, 2, &mut rng);
        let eps = LatentGrid::standard_normal(4, 4, 2, &mut rng);
        let out = forward_diffuse(&z0, 0, &eps, &sched).unwrap();
        assert_eq!(out, z0);
    }

    #[test]
    fn forward_diffuse_scalar_case() {
        // alpha_1 = 0.9, z0 = 1, eps = 1:
        // sqrt(0.9) + sqrt(0.1) = 0.9486832980505138 + 0.31622776601683794
        let sched = schedule2();
        let z0 = LatentGrid::<f64>::filled(1, 1, 1, 1.0);
        let eps = LatentGrid::<f64>::filled(1, 1, 1, 1.0);
        let out = forward_diffuse(&z0, 1, &eps, &sched).unwrap();
        assert_relative_eq!(out.data()[[0, 0, 0]], 1.2649110640673518, max_relative = 1e-12);
    }

    #[test]
    fn deterministic_step_ignores_noise() {
        let sched = schedule2();
        let mut rng = rng_from_seed(5);
        let zt = LatentGrid::standard_normal(3, 3, 2, &mut rng);
        let eps_hat = LatentGrid::standard_normal(3, 3, 2, &mut rng);
        let n1 = LatentGrid::standard_normal(3, 3, 2, &mut rng);
        let n2 = LatentGrid::standard_normal(3, 3, 2, &mut rng);
        let sigma = VarianceField::zero(3, 3, 2);
        let a = ddim_step(&zt, &eps_hat, 2, &sigma, &n1, &sched).unwrap();
        let b = ddim_step(&zt, &eps_hat, 2, &sigma, &n2, &sched).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_step_hand_value() {
        // t = 2, alpha_1 = 0.9, alpha_2 = 0.8, z = 1, eps_hat = 0.5, sigma = 0:
        // sqrt(0.9/0.8) * (1 - sqrt(0.2) * 0.5) + sqrt(0.1) * 0.5
        let sched = schedule2();
        let zt = LatentGrid::<f64>::filled(1, 1, 1, 1.0);
        let eps_hat = LatentGrid::<f64>::filled(1, 1, 1, 0.5);
        let noise = LatentGrid::<f64>::zeros(1, 1, 1);
        let sigma = VarianceField::zero(1, 1, 2);
        let out = ddim_step(&zt, &eps_hat, 2, &sigma, &noise, &sched).unwrap();
        let expect = (0.9f64 / 0.8).sqrt() * (1.0 - 0.2f64.sqrt() * 0.5) + 0.1f64.sqrt() * 0.5;
        assert_relative_eq!(out.data()[[0, 0, 0]], expect, max_relative = 1e-12);
    }

    #[test]
    fn stochastic_pixels_see_noise_deterministic_pixels_do_not() {
        let sched = schedule2();
        let mut rng = rng_from_seed(11);
        let zt = LatentGrid::standard_normal(2, 2, 3, &mut rng);
        let eps_hat = LatentGrid::standard_normal(2, 2, 3, &mut rng);
        let n1 = LatentGrid::standard_normal(2, 2, 3, &mut rng);
        let n2 = LatentGrid::standard_normal(2, 2, 3, &mut rng);
        let mask = arr2(&[[true, false], [false, false]]);
        let sigma = VarianceField::from_binary(&mask, 2, &sched).unwrap();
        let a = ddim_step(&zt, &eps_hat, 2, &sigma, &n1, &sched).unwrap();
        let b = ddim_step(&zt, &eps_hat, 2, &sigma, &n2, &sched).unwrap();
        for k in 0..3 {
            assert_ne!(a.data()[[0, 0, k]], b.data()[[0, 0, k]]);
        }
        for (i, j) in [(0, 1), (1, 0), (1, 1)] {
            for k in 0..3 {
                assert_eq!(a.data()[[i, j, k]], b.data()[[i, j, k]]);
            }
        }
    }

    #[test]
    fn uniform_field_matches_scalar_stochastic_update() {
        let sched = schedule2();
        let mut rng = rng_from_seed(17);
        let zt = LatentGrid::standard_normal(2, 2, 1, &mut rng);
        let eps_hat = LatentGrid::standard_normal(2, 2, 1, &mut rng);
        let noise = LatentGrid::standard_normal(2, 2, 1, &mut rng);
        let sigma = VarianceField::uniform(2, 2, 2, &sched).unwrap();
        let out = ddim_step(&zt, &eps_hat, 2, &sigma, &noise, &sched).unwrap();
        let s = sched.sigma(2).unwrap();
        let a = (0.9f64 / 0.8).sqrt();
        let b = 0.2f64.sqrt();
        let d = (1.0 - 0.9 - s * s).sqrt();
        for i in 0..2 {
            for j in 0..2 {
                let expect = a * (zt.data()[[i, j, 0]] - b * eps_hat.data()[[i, j, 0]])
                    + d * eps_hat.data()[[i, j, 0]]
                    + s * noise.data()[[i, j, 0]];
                assert_relative_eq!(out.data()[[i, j, 0]], expect, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn oversized_sigma_is_rejected() {
        let sched = schedule2();
        let values = arr2(&[[10.0f64]]);
        assert!(VarianceField::from_values(values, 2, &sched).is_err());
    }

    #[test]
    fn mismatched_field_timestep_is_rejected() {
        let sched = schedule2();
        let zt = LatentGrid::<f64>::zeros(1, 1, 1);
        let sigma = VarianceField::zero(1, 1, 1);
        let err = ddim_step(&zt, &zt, 2, &sigma, &zt, &sched);
        assert!(err.is_err());
    }

    #[test]
    fn trace_from_seed_is_reproducible() {
        let a = NoiseTrace::<f32>::from_seed(4, 4, 3, 5, 99).unwrap();
        let b = NoiseTrace::<f32>::from_seed(4, 4, 3, 5, 99).unwrap();
        assert_eq!(a.initial(), b.initial());
        for t in 1..=5 {
            assert_eq!(a.noise(t), b.noise(t));
        }
    }

    #[test]
    fn variance_field_active_fraction() {
        let sched = schedule2();
        let mask = arr2(&[[true, false], [true, true]]);
        let sigma = VarianceField::from_binary(&mask, 2, &sched).unwrap();
        assert_relative_eq!(sigma.active_fraction(), 0.75);
        // First step has sigma_1 = 0, so nothing is active even when masked.
        let sigma1 = VarianceField::from_binary(&mask, 1, &sched).unwrap();
        assert_eq!(sigma1.active_fraction(), 0.0);
    }
}
