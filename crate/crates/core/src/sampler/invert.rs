//! Trajectory inversion: from a clean image to a noise trace that replays
//! back to it.

use ndarray::Array2;

use super::{deterministic_part, forward_diffuse, VarianceField};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::rng::rng_from_seed;
use crate::sampler::NoiseTrace;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// A denoising operator already bound to its conditioning.
///
/// Implemented for any `Fn(&LatentGrid, t) -> Result<LatentGrid>`, so callers
/// can pass a closure that closes over a model and its prompt embeddings.
/// Implementations must be pure: the same `(z, t)` must give the same output,
/// otherwise replays cannot reproduce extractions.
pub trait DenoiseFn<S: Scalar> {
    /// Predicted noise for latent `z` at timestep `t`.
    fn eps(&self, z: &LatentGrid<S>, t: usize) -> Result<LatentGrid<S>>;
}

impl<S, F> DenoiseFn<S> for F
where
    S: Scalar,
    F: Fn(&LatentGrid<S>, usize) -> Result<LatentGrid<S>>,
{
    fn eps(&self, z: &LatentGrid<S>, t: usize) -> Result<LatentGrid<S>> {
        self(z, t)
    }
}

/// Reverse-step coefficients at `t`: `(a, b, c)` with
/// `a = sqrt(alpha_{t-1}/alpha_t)`, `b = sqrt(1 - alpha_t)` and
/// `c = sqrt(1 - alpha_{t-1}) - a * b`, so the deterministic update reads
/// `z_{t-1} = a * z_t + c' * eps` ... solved for `z_t` as
/// `z_t = (z_{t-1} - c * eps) / a`.
fn step_coefficients<S: Scalar>(schedule: &NoiseSchedule<S>, t: usize) -> (S, S, S) {
    let alpha_prev = schedule.alpha(t - 1);
    let alpha_cur = schedule.alpha(t);
    let a = (alpha_prev / alpha_cur).sqrt();
    let b = (S::one() - alpha_cur).sqrt();
    let c = (S::one() - alpha_prev).sqrt() - a * b;
    (a, b, c)
}

/// Naive deterministic inversion `z_0 -> z_T`.
///
/// Runs the reverse-step recurrence backwards, evaluating the noise
/// prediction at the already-known lower-noise state — i.e. it assumes the
/// prediction is locally constant across consecutive states. The returned
/// trace has all-zero per-step noise: replaying it deterministically
/// approximates (not exactly reproduces) the input.
pub fn ddim_invert<S: Scalar>(
    z0: &LatentGrid<S>,
    denoise: &impl DenoiseFn<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<NoiseTrace<S>> {
    let steps = schedule.num_steps();
    let (h, w, ch) = z0.shape();
    let mut z = z0.clone();
    for t in 1..=steps {
        let eps_hat = denoise.eps(&z, t)?;
        z.check_same_shape(&eps_hat, "inversion noise prediction")?;
        let (a, _, c) = step_coefficients(schedule, t);
        let next = (z.data() - &(eps_hat.data() * c)) / a;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                timestep: t,
                details: "inversion produced non-finite latent".into(),
            });
        }
        z = LatentGrid::from(next);
    }
    let zeros = (0..steps).map(|_| LatentGrid::zeros(h, w, ch)).collect();
    NoiseTrace::new(z, zeros, 0)
}

/// Knobs for the per-step solves in [`extract_consistent_noise`].
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyOpts {
    /// Stop a fixed-point solve once the residual's largest entry falls
    /// below this.
    pub fixed_point_tol: f64,
    /// Iteration cap per step; hitting it logs a warning and keeps the best
    /// iterate.
    pub max_iters: usize,
    /// History depth for Anderson acceleration of the fixed-point solves;
    /// 0 falls back to plain iteration. Acceleration matters when the
    /// contraction factor is close to 1 (coarse schedules, strong guidance).
    pub anderson_depth: usize,
}

impl Default for ConsistencyOpts {
    fn default() -> Self {
        Self {
            fixed_point_tol: 1e-12,
            max_iters: 256,
            anderson_depth: 5,
        }
    }
}

/// Anderson mixing over a short history of iterates and residuals: the next
/// iterate extrapolates through the least-squares combination of recent
/// residual differences. Falls back to a plain `u + f` step until two
/// history entries exist or when the normal equations degenerate.
struct AndersonMixer {
    depth: usize,
    us: Vec<Vec<f64>>,
    fs: Vec<Vec<f64>>,
}

impl AndersonMixer {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            us: Vec::new(),
            fs: Vec::new(),
        }
    }

    /// Record `(u_k, f_k)` and return `u_{k+1}`.
    fn step(&mut self, u: Vec<f64>, f: Vec<f64>) -> Vec<f64> {
        self.us.push(u);
        self.fs.push(f);
        if self.us.len() > self.depth + 1 {
            self.us.remove(0);
            self.fs.remove(0);
        }
        let k = self.us.len() - 1;
        let u_k = &self.us[k];
        let f_k = &self.fs[k];
        let n = u_k.len();
        let m = k.min(self.depth);
        if m == 0 {
            return (0..n).map(|i| u_k[i] + f_k[i]).collect();
        }

        // Column j of dF is f_{k-j} - f_{k-j-1}; same layout for dU.
        let col_f = |j: usize, i: usize| self.fs[k - j][i] - self.fs[k - j - 1][i];
        let col_u = |j: usize, i: usize| self.us[k - j][i] - self.us[k - j - 1][i];

        // Normal equations (dF^T dF + ridge) gamma = dF^T f_k.
        let mut gram = vec![0.0f64; m * m];
        let mut rhs = vec![0.0f64; m];
        for a in 0..m {
            for b in a..m {
                let mut s = 0.0;
                for i in 0..n {
                    s += col_f(a, i) * col_f(b, i);
                }
                gram[a * m + b] = s;
                gram[b * m + a] = s;
            }
            let mut s = 0.0;
            for i in 0..n {
                s += col_f(a, i) * f_k[i];
            }
            rhs[a] = s;
        }
        let ridge = 1e-12 * (0..m).map(|a| gram[a * m + a]).fold(0.0, f64::max).max(1e-300);
        for a in 0..m {
            gram[a * m + a] += ridge;
        }
        let Some(gamma) = solve_dense(&mut gram, &mut rhs, m) else {
            return (0..n).map(|i| u_k[i] + f_k[i]).collect();
        };

        let mut next = vec![0.0f64; n];
        for (i, slot) in next.iter_mut().enumerate() {
            let mut v = u_k[i] + f_k[i];
            for (j, g) in gamma.iter().enumerate() {
                v -= g * (col_u(j, i) + col_f(j, i));
            }
            *slot = v;
        }
        next
    }
}

/// In-place Gaussian elimination with partial pivoting on an `m x m` system;
/// `None` when a pivot collapses.
fn solve_dense(a: &mut [f64], b: &mut [f64], m: usize) -> Option<Vec<f64>> {
    for col in 0..m {
        let mut pivot = col;
        for r in col + 1..m {
            if a[r * m + col].abs() > a[pivot * m + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * m + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for c in 0..m {
                a.swap(col * m + c, pivot * m + c);
            }
            b.swap(col, pivot);
        }
        let d = a[col * m + col];
        for r in col + 1..m {
            let factor = a[r * m + col] / d;
            if factor == 0.0 {
                continue;
            }
            for c in col..m {
                a[r * m + c] -= factor * a[col * m + c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; m];
    for col in (0..m).rev() {
        let mut v = b[col];
        for c in col + 1..m {
            v -= a[col * m + c] * x[c];
        }
        x[col] = v / a[col * m + col];
    }
    Some(x)
}

/// Extract a noise trace that replays *exactly* to `z0` under the given
/// variance fields — see [`extract_consistent_noise_with`].
pub fn extract_consistent_noise<S: Scalar>(
    z0: &LatentGrid<S>,
    denoise: &impl DenoiseFn<S>,
    schedule: &NoiseSchedule<S>,
    sigma_fields: &[VarianceField<S>],
    seed: u64,
) -> Result<NoiseTrace<S>> {
    extract_consistent_noise_with(z0, denoise, schedule, sigma_fields, seed, ConsistencyOpts::default())
}

/// Build a [`NoiseTrace`] whose replay through [`super::replay_trace`] with
/// the same variance fields reproduces `z0`.
///
/// The trajectory is constructed backwards from `w_0 = z0`. At each step `t`
/// the pre-step state `w_t` is chosen so the reverse update maps it onto the
/// already-fixed `w_{t-1}`:
///
/// * pixels with a positive sigma entry are pinned to a reference forward
///   trajectory `sqrt(alpha_t) z0 + sqrt(1-alpha_t) eps` (drawn from `seed`),
///   and the step's noise grid absorbs the residual:
///   `noise = (w_{t-1} - deterministic_part(w_t)) / sigma`;
/// * pixels with sigma zero have no noise slot to absorb anything, so `w_t`
///   itself is solved there by Anderson-accelerated fixed-point iteration on
///   `u <- (w_{t-1} - c_t * eps_hat(u, t)) / a_t`.
///
/// Noise entries at sigma-zero pixels are filled with fresh draws (they are
/// inert during replay but keep the trace statistically unremarkable).
/// Running twice with the same inputs and seed yields bitwise-identical
/// traces.
///
/// The sigma-zero solves converge when the map above contracts, i.e. when
/// `|c_t| / a_t` times the prediction's Lipschitz constant stays below 1.
/// Very coarse schedules (large per-step alpha drops) can break that for the
/// final step, where sigma is always zero; extraction then keeps the best
/// iterate and logs a warning with the leftover residual, which bounds the
/// replay error. Use more steps when exact replay matters.
///
/// "Exactly" above means in exact arithmetic. In floating point each replay
/// step reproduces its target up to rounding (about 1 ulp), and that
/// perturbation grows through the remaining steps by the prediction's
/// step-to-step sensitivity. With a strongly nonlinear denoiser the end-to-end
/// error is roughly machine epsilon times the product of per-step gains, so
/// use `f64` (and moderate step counts) when tolerances below `1e-4` matter.
pub fn extract_consistent_noise_with<S: Scalar>(
    z0: &LatentGrid<S>,
    denoise: &impl DenoiseFn<S>,
    schedule: &NoiseSchedule<S>,
    sigma_fields: &[VarianceField<S>],
    seed: u64,
    opts: ConsistencyOpts,
) -> Result<NoiseTrace<S>> {
    let steps = schedule.num_steps();
    if sigma_fields.len() != steps {
        return Err(Error::invalid(format!(
            "got {} variance fields for {steps} steps",
            sigma_fields.len()
        )));
    }
    if opts.max_iters == 0 || !(opts.fixed_point_tol > 0.0) {
        return Err(Error::invalid("consistency options must have max_iters >= 1 and tol > 0"));
    }
    let (h, w, ch) = z0.shape();
    for f in sigma_fields {
        if f.shape() != (h, w) {
            return Err(Error::shape("extraction variance field", &[h, w], &[f.shape().0, f.shape().1]));
        }
    }

    // Below roughly 8 ulps of the scalar type the residual just jitters, so
    // that is the tightest tolerance worth chasing.
    let tol = opts.fixed_point_tol.max(S::epsilon().to_real() * 8.0);

    let mut rng = rng_from_seed(seed);
    let mut w_prev = z0.clone();
    let mut noises: Vec<LatentGrid<S>> = Vec::with_capacity(steps);
    let mut capped_steps = 0usize;
    let mut worst_residual = 0.0f64;

    for t in 1..=steps {
        let sigma = &sigma_fields[t - 1];
        if sigma.timestep() != t {
            return Err(Error::invalid(format!(
                "variance field built for timestep {} in slot {t}",
                sigma.timestep()
            )));
        }
        // Draw both grids up front so the stream layout never depends on the
        // masks or on how many iterations the solve takes.
        let eps_ref = LatentGrid::standard_normal(h, w, ch, &mut rng);
        let eps_fill = LatentGrid::standard_normal(h, w, ch, &mut rng);
        let z_ref = forward_diffuse(z0, t, &eps_ref, schedule)?;

        let pinned: Array2<bool> = sigma.values().mapv(|v| v > S::zero());
        let (a, _, c) = step_coefficients(schedule, t);

        let free: Vec<(usize, usize, usize)> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .filter(|&(i, j)| !pinned[[i, j]])
            .flat_map(|(i, j)| (0..ch).map(move |k| (i, j, k)))
            .collect();

        let mut u = z_ref;
        if !free.is_empty() {
            let mut mixer = AndersonMixer::new(opts.anderson_depth);
            let mut u_free: Vec<f64> = free.iter().map(|&p| u.data()[p].to_real()).collect();
            let mut best: Option<(f64, Vec<f64>)> = None;
            let mut since_improvement = 0usize;
            let mut converged = false;
            for _ in 0..opts.max_iters {
                for (slot, &p) in free.iter().enumerate() {
                    u.data_mut()[p] = S::from_real(u_free[slot]);
                }
                if !u.is_finite() {
                    return Err(Error::NumericDomain {
                        timestep: t,
                        details: "noise extraction solve diverged".into(),
                    });
                }
                let eps_hat = denoise.eps(&u, t)?;
                u.check_same_shape(&eps_hat, "extraction noise prediction")?;
                let mut f = vec![0.0f64; free.len()];
                let mut res = 0.0f64;
                for (slot, &p) in free.iter().enumerate() {
                    let g = ((w_prev.data()[p] - c * eps_hat.data()[p]) / a).to_real();
                    f[slot] = g - u_free[slot];
                    res = res.max(f[slot].abs());
                }
                if !res.is_finite() {
                    return Err(Error::NumericDomain {
                        timestep: t,
                        details: "noise extraction solve diverged".into(),
                    });
                }
                if best.as_ref().is_none_or(|(b, _)| res < *b) {
                    best = Some((res, u_free.clone()));
                    since_improvement = 0;
                } else {
                    since_improvement += 1;
                }
                if res <= tol {
                    converged = true;
                    break;
                }
                // Bouncing along the precision floor; more evaluations will
                // not help.
                if since_improvement >= 12 {
                    break;
                }
                u_free = mixer.step(u_free, f);
            }
            let (best_res, best_u) = best.expect("at least one iteration ran");
            if !converged {
                capped_steps += 1;
                worst_residual = worst_residual.max(best_res);
            }
            for (slot, &p) in free.iter().enumerate() {
                u.data_mut()[p] = S::from_real(best_u[slot]);
            }
        }

        // One final evaluation at the settled state; replay will call the
        // denoiser with this exact latent, giving a bitwise-equal prediction.
        let eps_hat = denoise.eps(&u, t)?;
        u.check_same_shape(&eps_hat, "extraction noise prediction")?;
        let det = deterministic_part(&u, &eps_hat, t, sigma, schedule)?;

        let mut noise = eps_fill.into_inner();
        {
            let wp = w_prev.data();
            for i in 0..h {
                for j in 0..w {
                    let s = sigma.values()[[i, j]];
                    if s > S::zero() {
                        for k in 0..ch {
                            noise[[i, j, k]] = (wp[[i, j, k]] - det[[i, j, k]]) / s;
                        }
                    }
                }
            }
        }
        if noise.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                timestep: t,
                details: "extracted noise grid is non-finite".into(),
            });
        }
        noises.push(LatentGrid::from(noise));
        w_prev = u;
    }

    if capped_steps > 0 {
        log::warn!(
            "noise extraction left {capped_steps} of {steps} fixed-point solves unconverged \
             (worst residual {worst_residual:.2e} vs tolerance {tol:.2e}); replay error will be \
             of that order — a finer schedule usually fixes this"
        );
    }
    NoiseTrace::new(w_prev, noises, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{replay_trace, uniform_fields, zero_fields};
    use ndarray::arr2;

    fn gentle_schedule() -> NoiseSchedule<f64> {
        let alphas = (1..=8).map(|t| 1.0 - 0.02 * t as f64).collect();
        NoiseSchedule::from_alphas(alphas, 1.0).unwrap()
    }

    /// Noise prediction that ignores the latent: inversion's locally-constant
    /// assumption holds exactly, so the round trip is machine precision.
    fn constant_denoiser(z: &LatentGrid<f64>, _t: usize) -> Result<LatentGrid<f64>> {
        let (h, w, c) = z.shape();
        Ok(LatentGrid::filled(h, w, c, 0.37))
    }

    /// A state-dependent but smooth prediction.
    fn smooth_denoiser(z: &LatentGrid<f64>, t: usize) -> Result<LatentGrid<f64>> {
        let shift = 0.05 * t as f64;
        Ok(z.map(|v| (0.4 * v + shift).tanh()))
    }

    #[test]
    fn invert_round_trip_constant_prediction() {
        let sched = gentle_schedule();
        let mut rng = rng_from_seed(21);
        let z0 = LatentGrid::standard_normal(4, 4, 2, &mut rng);
        let trace = ddim_invert(&z0, &constant_denoiser, &sched).unwrap();
        let fields = zero_fields(4, 4, &sched);
        let back = replay_trace(&trace, &constant_denoiser, &sched, &fields).unwrap();
        assert!(z0.rmse(&back) < 1e-12, "rmse = {}", z0.rmse(&back));
    }

    #[test]
    fn invert_round_trip_smooth_prediction_small_error() {
        // The locally-constant assumption degrades with step size, so the
        // 1e-4 budget needs genuinely small alpha drops.
        let alphas = (1..=10).map(|t| 1.0 - 0.0002 * t as f64).collect();
        let sched = NoiseSchedule::from_alphas(alphas, 1.0).unwrap();
        let mut rng = rng_from_seed(22);
        let z0 = LatentGrid::standard_normal(4, 4, 2, &mut rng);
        let trace = ddim_invert(&z0, &smooth_denoiser, &sched).unwrap();
        let fields = zero_fields(4, 4, &sched);
        let back = replay_trace(&trace, &smooth_denoiser, &sched, &fields).unwrap();
        let err = z0
            .data()
            .iter()
            .zip(back.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err <= 1e-4, "max abs error = {err}");
    }

    #[test]
    fn consistent_extraction_replays_exactly_all_deterministic() {
        let sched = gentle_schedule();
        let mut rng = rng_from_seed(23);
        let z0 = LatentGrid::standard_normal(4, 4, 2, &mut rng);
        let fields = zero_fields(4, 4, &sched);
        let trace = extract_consistent_noise(&z0, &smooth_denoiser, &sched, &fields, 7).unwrap();
        let back = replay_trace(&trace, &smooth_denoiser, &sched, &fields).unwrap();
        assert!(z0.rmse(&back) < 1e-10, "rmse = {}", z0.rmse(&back));
    }

    #[test]
    fn consistent_extraction_replays_exactly_all_stochastic() {
        let sched = gentle_schedule();
        let mut rng = rng_from_seed(24);
        let z0 = LatentGrid::standard_normal(4, 4, 2, &mut rng);
        let fields = uniform_fields(4, 4, &sched).unwrap();
        let trace = extract_consistent_noise(&z0, &smooth_denoiser, &sched, &fields, 7).unwrap();
        let back = replay_trace(&trace, &smooth_denoiser, &sched, &fields).unwrap();
        assert!(z0.rmse(&back) < 1e-12, "rmse = {}", z0.rmse(&back));
    }

    #[test]
    fn consistent_extraction_replays_exactly_mixed_mask() {
        let sched = gentle_schedule();
        let mut rng = rng_from_seed(25);
        let z0 = LatentGrid::standard_normal(4, 4, 2, &mut rng);
        let mask = arr2(&[
            [true, false, false, true],
            [false, true, false, false],
            [false, false, false, false],
            [true, true, false, true],
        ]);
        let fields: Vec<_> = (1..=sched.num_steps())
            .map(|t| VarianceField::from_binary(&mask, t, &sched).unwrap())
            .collect();
        let trace = extract_consistent_noise(&z0, &smooth_denoiser, &sched, &fields, 9).unwrap();
        let back = replay_trace(&trace, &smooth_denoiser, &sched, &fields).unwrap();
        assert!(z0.rmse(&back) < 1e-10, "rmse = {}", z0.rmse(&back));
    }

    #[test]
    fn extraction_is_seed_deterministic() {
        let sched = gentle_schedule();
        let mut rng = rng_from_seed(26);
        let z0 = LatentGrid::standard_normal(3, 3, 1, &mut rng);
        let fields = uniform_fields(3, 3, &sched).unwrap();
        let a = extract_consistent_noise(&z0, &smooth_denoiser, &sched, &fields, 41).unwrap();
        let b = extract_consistent_noise(&z0, &smooth_denoiser, &sched, &fields, 41).unwrap();
        assert_eq!(a.initial(), b.initial());
        for t in 1..=sched.num_steps() {
            assert_eq!(a.noise(t), b.noise(t));
        }
        let c = extract_consistent_noise(&z0, &smooth_denoiser, &sched, &fields, 42).unwrap();
        assert_ne!(a.initial(), c.initial());
    }

    #[test]
    fn extraction_rejects_wrong_field_count() {
        let sched = gentle_schedule();
        let z0 = LatentGrid::<f64>::zeros(2, 2, 1);
        let fields = zero_fields(2, 2, &sched)[..3].to_vec();
        assert!(extract_consistent_noise(&z0, &smooth_denoiser, &sched, &fields, 1).is_err());
    }
}
