//! The dual-branch editing loop.
//!
//! One edit runs two synchronized denoising trajectories from a shared noise
//! trace. The source branch replays the trace extracted around the input
//! image, reconstructing it exactly; the target branch follows the edited
//! prompt. Each step the engine
//!
//! 1. evaluates both branches (classifier-free guided), forcing the source
//!    branch's attention maps into the target during the early steps;
//! 2. grounds the editing area from both branches' cross-attention, refined
//!    through self-attention and smoothed across steps;
//! 3. re-enables sampling noise inside the strict mask (target branch only)
//!    and advances both branches with the shared per-step noise;
//! 4. copies the source branch back in outside the loose mask, so background
//!    pixels come from the reconstruction bit for bit.

mod diagnostics;
mod session;

pub use session::{EditSession, Hyperparams, PromptSpec, VarianceMode};

use ndarray::Array2;

use crate::attention::{inject_policy, AttentionBundle, AttentionKind};
use crate::denoiser::{Denoiser, DenoiserInput, ImageConditioning, PromptEncoding};
use crate::embedding::{estimate_target_embedding, JointEmbedder};
use crate::error::{Error, Result};
use crate::grid::{from_latent, to_latent, LatentGrid};
use crate::grounding::{
    build_interpatch_matrix, combine_and_mask, combine_saliency, initial_saliency,
    refine_saliency, upsample_saliency, EditMask, GroundingStrategy, SaliencyTracker,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::{
    ddim_step, extract_consistent_noise, forward_diffuse, uniform_fields, VarianceField,
};
use crate::scalar::Scalar;

/// Stream label for the extraction RNG so the trace never shares a stream
/// with other consumers of the session seed.
const EXTRACTION_STREAM: u64 = 1;
/// Stream label for the one-shot grounding preview.
const GROUNDING_STREAM: u64 = 2;

/// Per-step record of what the engine grounded and injected.
#[derive(Debug, Clone)]
pub struct StepDiagnostics<S> {
    /// Reverse timestep this record belongs to (T first, down to 1).
    pub timestep: usize,
    /// Smoothed latent-resolution saliency the masks were cut from.
    pub saliency: Array2<S>,
    /// Loose and strict masks at this step.
    pub mask: EditMask,
    /// Fraction of pixels with nonzero sampling variance in the target
    /// branch this step.
    pub sigma_fraction: f64,
    /// Whether source attention maps were forced into the target this step.
    pub injected_cross: bool,
    pub injected_self: bool,
}

/// Everything an edit run returns.
#[derive(Debug, Clone)]
pub struct EditOutcome<S> {
    /// Edited image in `[0, 1]` units.
    pub edited: LatentGrid<S>,
    /// The source branch's reconstruction of the input, same units.
    pub reconstruction: LatentGrid<S>,
    /// One record per reverse step, in sampling order.
    pub steps: Vec<StepDiagnostics<S>>,
}

impl<S> EditOutcome<S> {
    /// The mask that shaped the final blend (last step's).
    pub fn final_mask(&self) -> Option<&EditMask> {
        self.steps.last().map(|s| &s.mask)
    }
}

/// Masked composition of the two branches: target pixels where the loose
/// mask is set, source pixels elsewhere. Binary selection rather than
/// arithmetic mixing, so every copied pixel is bit-equal to its origin.
pub fn blend_background<S: Scalar>(
    z_tgt: &LatentGrid<S>,
    z_src: &LatentGrid<S>,
    mask: &EditMask,
) -> Result<LatentGrid<S>> {
    z_tgt.check_same_shape(z_src, "background blend")?;
    let (h, w, c) = z_tgt.shape();
    if mask.blend.dim() != (h, w) {
        return Err(Error::shape(
            "blend mask",
            &[h, w],
            &[mask.blend.nrows(), mask.blend.ncols()],
        ));
    }
    let mut out = z_tgt.data().clone();
    let src = z_src.data();
    for i in 0..h {
        for j in 0..w {
            if !mask.blend[[i, j]] {
                for k in 0..c {
                    out[[i, j, k]] = src[[i, j, k]];
                }
            }
        }
    }
    Ok(LatentGrid::from(out))
}

/// Run an edit session.
///
/// Numeric failures carry the timestep they happened at; see
/// [`edit_with_diagnostics`] for a variant that also writes the partial
/// diagnostics to disk when a run aborts.
pub fn edit<S, D, E>(session: &EditSession<S>, denoiser: &D, embedder: &E) -> Result<EditOutcome<S>>
where
    S: Scalar,
    D: Denoiser<S>,
    E: JointEmbedder<S>,
{
    let mut steps = Vec::new();
    let (edited, reconstruction) = run_edit(session, denoiser, embedder, &mut steps)?;
    Ok(EditOutcome {
        edited,
        reconstruction,
        steps,
    })
}

/// [`edit`], plus a diagnostics directory: per-step saliency and mask PNGs
/// and a JSON manifest (hyperparameters, seed, per-step variance fractions,
/// wall-clock timings). On failure the steps completed so far are still
/// written, with the error recorded in the manifest, and the original error
/// is returned.
pub fn edit_with_diagnostics<S, D, E>(
    session: &EditSession<S>,
    denoiser: &D,
    embedder: &E,
    dir: &std::path::Path,
) -> Result<EditOutcome<S>>
where
    S: Scalar,
    D: Denoiser<S>,
    E: JointEmbedder<S>,
{
    let started = std::time::Instant::now();
    let mut steps = Vec::new();
    match run_edit(session, denoiser, embedder, &mut steps) {
        Ok((edited, reconstruction)) => {
            let outcome = EditOutcome {
                edited,
                reconstruction,
                steps,
            };
            diagnostics::write_report(dir, session, &outcome.steps, Some(&outcome), None, started.elapsed())?;
            Ok(outcome)
        }
        Err(e) => {
            if let Err(io_err) =
                diagnostics::write_report(dir, session, &steps, None, Some(&e), started.elapsed())
            {
                log::warn!("failed to write abort diagnostics to {}: {io_err}", dir.display());
            }
            Err(e)
        }
    }
}

/// One-shot grounding preview without running an edit: the image is
/// forward-diffused to `timestep`, both prompts are evaluated once on that
/// noisy latent (no injection, no guidance), and the combined saliency is
/// thresholded with the session thresholds. Useful for visualizing what a
/// full run would start from and for scoring grounding quality on its own.
pub fn ground_once<S, D, E>(
    image: &LatentGrid<S>,
    prompts: &PromptSpec,
    denoiser: &D,
    embedder: &E,
    schedule: &crate::schedule::NoiseSchedule<S>,
    hyper: &Hyperparams,
    timestep: usize,
    seed: u64,
) -> Result<(Array2<S>, EditMask)>
where
    S: Scalar,
    D: Denoiser<S>,
    E: JointEmbedder<S>,
{
    hyper.validate()?;
    prompts.validate()?;
    schedule.check_step(timestep)?;
    let total = schedule.num_steps();
    let (h, w, c) = image.shape();

    let p_src = denoiser.encode_prompt(&prompts.source_prompt)?;
    let p_tgt = denoiser.encode_prompt(&prompts.target_prompt)?;
    let src_positions = prompts.resolve(&p_src);
    let tgt_positions = prompts.resolve(&p_tgt);
    let conditioning = branch_conditioning(embedder, image, prompts, hyper)?;

    let mut rng = rng_from_seed(derive_seed(seed, GROUNDING_STREAM));
    let eps = LatentGrid::standard_normal(h, w, c, &mut rng);
    let zt = forward_diffuse(&to_latent(image), timestep, &eps, schedule)?;

    let pass = |prompt: &PromptEncoding<S>, image_cond: Option<&ImageConditioning<S>>| {
        denoiser.predict_noise(&DenoiserInput {
            latent: &zt,
            timestep,
            total_steps: total,
            prompt,
            image: image_cond,
            injected: None,
        })
    };
    let (_, maps_src) = pass(&p_src, conditioning.source.as_ref())?;
    let (_, maps_tgt) = pass(&p_tgt, conditioning.target.as_ref())?;

    let s_src = branch_saliency(&maps_src, &src_positions, hyper)?;
    let s_tgt = branch_saliency(&maps_tgt, &tgt_positions, hyper)?;
    combine_and_mask(
        &s_src,
        &s_tgt,
        hyper.blend_threshold,
        hyper.variance_threshold,
        h,
        w,
    )
}

/// Image conditioning for both branches, or `None`s when embedding guidance
/// is off. The target side carries the estimated target-image embedding
/// (source image embedding shifted by the prompt-embedding difference).
struct BranchConditioning<S> {
    source: Option<ImageConditioning<S>>,
    target: Option<ImageConditioning<S>>,
}

fn branch_conditioning<S: Scalar, E: JointEmbedder<S>>(
    embedder: &E,
    image: &LatentGrid<S>,
    prompts: &PromptSpec,
    hyper: &Hyperparams,
) -> Result<BranchConditioning<S>> {
    if !hyper.embedding_guidance {
        return Ok(BranchConditioning {
            source: None,
            target: None,
        });
    }
    let e_img = embedder.embed_image(image)?;
    let e_src = embedder.embed_text(&prompts.source_prompt)?;
    let e_tgt = embedder.embed_text(&prompts.target_prompt)?;
    let estimated = estimate_target_embedding(&e_img, &e_src, &e_tgt, hyper.renormalize_estimate)?;
    let weight = S::from_real(hyper.conditioning_weight);
    Ok(BranchConditioning {
        source: Some(ImageConditioning::new(e_img, weight)),
        target: Some(ImageConditioning::new(estimated, weight)),
    })
}

/// One classifier-free-guided branch evaluation: the conditional pass plus,
/// when `guidance != 1`, an unconditional pass (null prompt, no image
/// conditioning), combined as `uncond + guidance * (cond - uncond)`. Each
/// pass may have its own forced maps; the returned bundles are each pass's
/// *own* maps regardless of injection.
struct BranchEval<S> {
    eps: LatentGrid<S>,
    cond_maps: AttentionBundle<S>,
    uncond_maps: Option<AttentionBundle<S>>,
}

#[allow(clippy::too_many_arguments)]
fn guided_eval<S: Scalar, D: Denoiser<S>>(
    denoiser: &D,
    latent: &LatentGrid<S>,
    timestep: usize,
    total_steps: usize,
    prompt: &PromptEncoding<S>,
    null_prompt: &PromptEncoding<S>,
    image: Option<&ImageConditioning<S>>,
    guidance: f64,
    inject_cond: Option<&AttentionBundle<S>>,
    inject_uncond: Option<&AttentionBundle<S>>,
) -> Result<BranchEval<S>> {
    let (eps_cond, cond_maps) = denoiser.predict_noise(&DenoiserInput {
        latent,
        timestep,
        total_steps,
        prompt,
        image,
        injected: inject_cond,
    })?;
    if guidance == 1.0 {
        return Ok(BranchEval {
            eps: eps_cond,
            cond_maps,
            uncond_maps: None,
        });
    }
    let (eps_uncond, uncond_maps) = denoiser.predict_noise(&DenoiserInput {
        latent,
        timestep,
        total_steps,
        prompt: null_prompt,
        image: None,
        injected: inject_uncond,
    })?;
    let g = S::from_real(guidance);
    let data = ndarray::Zip::from(eps_uncond.data())
        .and(eps_cond.data())
        .map_collect(|&u, &c| u + g * (c - u));
    Ok(BranchEval {
        eps: LatentGrid::from(data),
        cond_maps,
        uncond_maps: Some(uncond_maps),
    })
}

/// The subset of `maps` to force at this step, or `None` when the policy
/// forces nothing. Text cross-attention is only ever forced when the two
/// prompts tokenize to the same length (`cross_ok`), since the maps' key
/// columns must line up.
fn active_injection<S: Scalar>(
    maps: &AttentionBundle<S>,
    step_index: usize,
    total_steps: usize,
    hyper: &Hyperparams,
    cross_ok: bool,
) -> Option<AttentionBundle<S>> {
    let force_cross =
        cross_ok && inject_policy(step_index, total_steps, hyper.cross_injection_cutoff);
    let force_self = inject_policy(step_index, total_steps, hyper.self_injection_cutoff);
    if !force_cross && !force_self {
        return None;
    }
    let filtered = maps.filtered(|r| match r.kind {
        AttentionKind::TextCross => force_cross,
        AttentionKind::SelfAttention => force_self,
    });
    if filtered.is_empty() {
        None
    } else {
        Some(filtered)
    }
}

/// One branch's saliency at the self-attention resolution: coarse
/// cross-attention saliency upsampled there and, under the refined strategy,
/// propagated through the branch's own inter-patch matrix. Empty `positions`
/// (no blend word occurs in this branch's prompt) yield an all-zero map.
fn branch_saliency<S: Scalar>(
    maps: &AttentionBundle<S>,
    positions: &[usize],
    hyper: &Hyperparams,
) -> Result<Array2<S>> {
    let side = refinement_side(maps)?;
    if positions.is_empty() {
        return Ok(Array2::zeros((side, side)));
    }
    let coarse = initial_saliency(maps, positions)?;
    let up = upsample_saliency(&coarse, side, side)?;
    match hyper.grounding {
        GroundingStrategy::CrossAttentionOnly => Ok(up),
        GroundingStrategy::Refined => refine_saliency(
            &up,
            &build_interpatch_matrix(maps)?,
            hyper.refine_mix,
            hyper.refine_iters,
        ),
    }
}

/// Side length of the self-attention patch grid, where saliency from both
/// strategies is expressed so they stay comparable.
fn refinement_side<S: Scalar>(maps: &AttentionBundle<S>) -> Result<usize> {
    let records = maps.of_kind(AttentionKind::SelfAttention);
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("no self-attention records to size the saliency grid"))?;
    let n = first.weights.nrows();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::invalid(format!(
            "{n} self-attention patches do not form a square grid"
        )));
    }
    Ok(side)
}

/// The target branch's per-pixel sigma for step `t` under the session's
/// variance mode, scaled by `variance_scale`.
fn target_variance<S: Scalar>(
    t: usize,
    mask: &EditMask,
    hyper: &Hyperparams,
    schedule: &crate::schedule::NoiseSchedule<S>,
    height: usize,
    width: usize,
) -> Result<VarianceField<S>> {
    match hyper.variance_mode {
        VarianceMode::FixedZero => Ok(VarianceField::zero(height, width, t)),
        VarianceMode::FixedNonzero => {
            let sigma = schedule.sigma(t)? * S::from_real(hyper.variance_scale);
            VarianceField::from_values(Array2::from_elem((height, width), sigma), t, schedule)
        }
        VarianceMode::Adaptive => {
            let sigma = schedule.sigma(t)? * S::from_real(hyper.variance_scale);
            let values = mask
                .variance
                .mapv(|on| if on { sigma } else { S::zero() });
            VarianceField::from_values(values, t, schedule)
        }
    }
}

/// The loop body shared by [`edit`] and [`edit_with_diagnostics`]; `steps`
/// accumulates diagnostics so callers can dump them even when the run
/// aborts.
fn run_edit<S, D, E>(
    session: &EditSession<S>,
    denoiser: &D,
    embedder: &E,
    steps: &mut Vec<StepDiagnostics<S>>,
) -> Result<(LatentGrid<S>, LatentGrid<S>)>
where
    S: Scalar,
    D: Denoiser<S>,
    E: JointEmbedder<S>,
{
    session.validate()?;
    let hyper = &session.hyperparams;
    let schedule = &session.schedule;
    let total = schedule.num_steps();
    let shape = session.source_image.shape();
    if denoiser.latent_shape() != shape {
        let (h, w, c) = shape;
        let (mh, mw, mc) = denoiser.latent_shape();
        return Err(Error::shape("session image vs denoiser", &[mh, mw, mc], &[h, w, c]));
    }
    let (h, w, _) = shape;

    // Conditioning for both branches.
    let p_src = denoiser.encode_prompt(&session.prompts.source_prompt)?;
    let p_tgt = denoiser.encode_prompt(&session.prompts.target_prompt)?;
    let p_null = denoiser.encode_prompt("")?;
    let src_positions = session.prompts.resolve(&p_src);
    let tgt_positions = session.prompts.resolve(&p_tgt);
    let cross_ok = p_src.len() == p_tgt.len();
    if !cross_ok {
        log::info!(
            "prompts tokenize to {} vs {} tokens; text cross-attention injection disabled",
            p_src.len(),
            p_tgt.len()
        );
    }
    let conditioning = branch_conditioning(embedder, &session.source_image, &session.prompts, hyper)?;

    // Noise trace that replays to the source image under the schedule's own
    // per-step sigma. The closure must match the in-loop source evaluation
    // exactly so the replay below reproduces what extraction assumed.
    let z0 = to_latent(&session.source_image);
    let src_fields = uniform_fields(h, w, schedule)?;
    let source_eps = |z: &LatentGrid<S>, t: usize| -> Result<LatentGrid<S>> {
        Ok(guided_eval(
            denoiser,
            z,
            t,
            total,
            &p_src,
            &p_null,
            conditioning.source.as_ref(),
            hyper.guidance_scale,
            None,
            None,
        )?
        .eps)
    };
    let trace = extract_consistent_noise(
        &z0,
        &source_eps,
        schedule,
        &src_fields,
        derive_seed(session.seed, EXTRACTION_STREAM),
    )?;

    let mut z_src = trace.initial().clone();
    let mut z_tgt = trace.initial().clone();
    let mut tracker = SaliencyTracker::new(hyper.saliency_smoothing)?;

    for t in (1..=total).rev() {
        let step_index = total - t;
        let src_eval = guided_eval(
            denoiser,
            &z_src,
            t,
            total,
            &p_src,
            &p_null,
            conditioning.source.as_ref(),
            hyper.guidance_scale,
            None,
            None,
        )?;
        let inj_cond = active_injection(&src_eval.cond_maps, step_index, total, hyper, cross_ok);
        let inj_uncond = src_eval
            .uncond_maps
            .as_ref()
            .and_then(|m| active_injection(m, step_index, total, hyper, cross_ok));
        let tgt_eval = guided_eval(
            denoiser,
            &z_tgt,
            t,
            total,
            &p_tgt,
            &p_null,
            conditioning.target.as_ref(),
            hyper.guidance_scale,
            inj_cond.as_ref(),
            inj_uncond.as_ref(),
        )?;

        // Ground this step's masks from both branches' own maps, before the
        // sampler step (the first step uses its freshly captured attention).
        let s_src = branch_saliency(&src_eval.cond_maps, &src_positions, hyper)?;
        let s_tgt = branch_saliency(&tgt_eval.cond_maps, &tgt_positions, hyper)?;
        let combined = combine_saliency(&s_src, &s_tgt)?;
        let at_latent = upsample_saliency(&combined, h, w)?;
        let smoothed = tracker.update(&at_latent)?.clone();
        let mask = EditMask::from_saliency(&smoothed, hyper.blend_threshold, hyper.variance_threshold)?;

        let sigma_tgt = target_variance(t, &mask, hyper, schedule, h, w)?;
        let noise = trace.noise(t);
        z_src = ddim_step(&z_src, &src_eval.eps, t, &src_fields[t - 1], noise, schedule)?;
        let stepped = ddim_step(&z_tgt, &tgt_eval.eps, t, &sigma_tgt, noise, schedule)?;
        z_tgt = blend_background(&stepped, &z_src, &mask)?;

        steps.push(StepDiagnostics {
            timestep: t,
            saliency: smoothed,
            sigma_fraction: sigma_tgt.active_fraction(),
            injected_cross: inj_cond.is_some()
                && cross_ok
                && inject_policy(step_index, total, hyper.cross_injection_cutoff),
            injected_self: inj_cond.is_some()
                && inject_policy(step_index, total, hyper.self_injection_cutoff),
            mask,
        });
    }

    Ok((from_latent(&z_tgt), from_latent(&z_src)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use crate::toy::{
        train_toy_denoiser, train_toy_embedder, training_scenes, DenoiserTrainOpts,
        EmbedderTrainOpts, ToyDenoiser, ToyDenoiserConfig, ToyEmbedderConfig, ToyJointEmbedder,
    };
    use ndarray::arr2;

    #[test]
    fn blend_examples() {
        let tgt = LatentGrid::<f64>::filled(2, 2, 1, 1.0);
        let src = LatentGrid::<f64>::filled(2, 2, 1, 2.0);
        let all = |v| EditMask {
            blend: Array2::from_elem((2, 2), v),
            variance: Array2::from_elem((2, 2), false),
        };
        assert_eq!(blend_background(&tgt, &src, &all(true)).unwrap(), tgt);
        assert_eq!(blend_background(&tgt, &src, &all(false)).unwrap(), src);

        let checker = EditMask {
            blend: arr2(&[[true, false], [false, true]]),
            variance: Array2::from_elem((2, 2), false),
        };
        let out = blend_background(&tgt, &src, &checker).unwrap();
        assert_eq!(out.data()[[0, 0, 0]], 1.0);
        assert_eq!(out.data()[[0, 1, 0]], 2.0);
        assert_eq!(out.data()[[1, 0, 0]], 2.0);
        assert_eq!(out.data()[[1, 1, 0]], 1.0);
    }

    #[test]
    fn blend_rejects_mismatched_shapes() {
        let tgt = LatentGrid::<f64>::zeros(2, 2, 1);
        let src = LatentGrid::<f64>::zeros(2, 3, 1);
        let mask = EditMask {
            blend: Array2::from_elem((2, 2), true),
            variance: Array2::from_elem((2, 2), false),
        };
        assert!(blend_background(&tgt, &src, &mask).is_err());
        let src_ok = LatentGrid::<f64>::zeros(2, 2, 1);
        let bad_mask = EditMask {
            blend: Array2::from_elem((3, 2), true),
            variance: Array2::from_elem((3, 2), false),
        };
        assert!(blend_background(&tgt, &src_ok, &bad_mask).is_err());
    }

    /// Small trained fixture shared by the loop tests. Training is light:
    /// these tests check mechanics (determinism, identity, symmetry), not
    /// edit quality.
    fn fixture() -> (ToyDenoiser<f32>, ToyJointEmbedder<f32>, NoiseSchedule<f32>) {
        let scenes = training_scenes(24, 77);
        // 8 steps: coarse enough to stay fast, fine enough that the
        // extraction replay holds well under the 1e-3 identity budget in f32
        // (replay rounding grows with the step count; see the extraction
        // docs).
        let schedule = NoiseSchedule::subsampled_linear_beta(1000, 8, 1.0).unwrap();
        let mut embedder = ToyJointEmbedder::new(ToyEmbedderConfig::default(), 7).unwrap();
        train_toy_embedder(
            &mut embedder,
            &scenes,
            &EmbedderTrainOpts {
                epochs: 6,
                seed: 11,
                ..Default::default()
            },
        )
        .unwrap();
        let mut model = ToyDenoiser::new(ToyDenoiserConfig::default(), 8).unwrap();
        train_toy_denoiser(
            &mut model,
            &embedder,
            &scenes,
            &schedule,
            &DenoiserTrainOpts {
                epochs: 2,
                seed: 12,
                ..Default::default()
            },
        )
        .unwrap();
        (model, embedder, schedule)
    }

    fn quick_hyper() -> Hyperparams {
        Hyperparams {
            guidance_scale: 2.0,
            ..Default::default()
        }
    }

    #[test]
    fn identity_edit_reconstructs_the_source() {
        let (model, embedder, schedule) = fixture();
        let scene = crate::toy::SceneSpec::random(&mut rng_from_seed(1));
        let img = scene.render();
        let prompt = scene.describe();
        let session = EditSession::new(
            img.clone(),
            PromptSpec::derived(&prompt, &prompt),
            schedule,
            quick_hyper(),
            5,
        )
        .unwrap();
        let out = edit(&session, &model, &embedder).unwrap();
        // Empty effective mask: the output is the reconstruction, which is
        // the extracted trace replayed.
        assert_eq!(out.edited, out.reconstruction);
        let rmse = img.rmse(&out.edited);
        assert!(rmse <= 1e-3, "identity edit rmse = {rmse}");
        for s in &out.steps {
            assert_eq!(s.mask.blend_fraction(), 0.0);
            assert_eq!(s.sigma_fraction, 0.0);
        }
    }

    #[test]
    fn edits_are_bit_reproducible() {
        let (model, embedder, schedule) = fixture();
        let case = crate::toy::EditCase::random(
            crate::toy::SceneSpec::random(&mut rng_from_seed(2)),
            crate::toy::EditKind::ChangeColor,
            &mut rng_from_seed(3),
        );
        let session = EditSession::new(
            case.source.render(),
            PromptSpec::derived(&case.source_prompt(), &case.target_prompt()),
            schedule,
            quick_hyper(),
            9,
        )
        .unwrap();
        let a = edit(&session, &model, &embedder).unwrap();
        let b = edit(&session, &model, &embedder).unwrap();
        assert_eq!(a.edited, b.edited);
        assert_eq!(a.reconstruction, b.reconstruction);
        assert_eq!(a.steps.len(), b.steps.len());
        for (x, y) in a.steps.iter().zip(b.steps.iter()) {
            assert_eq!(x.saliency, y.saliency);
            assert_eq!(x.mask.blend, y.mask.blend);
            assert_eq!(x.mask.variance, y.mask.variance);
        }
    }

    #[test]
    fn branch_symmetry_under_a_degenerate_configuration() {
        // Identical prompts, no injection, no image conditioning, and a
        // zero-variance schedule: the target trajectory must equal the
        // source trajectory, so the edit equals the reconstruction even with
        // a forced nonempty blend mask.
        let (model, embedder, _) = fixture();
        let schedule = NoiseSchedule::<f32>::subsampled_linear_beta(1000, 10, 0.0).unwrap();
        let scene = crate::toy::SceneSpec::random(&mut rng_from_seed(4));
        let prompt = scene.describe();
        let hyper = Hyperparams {
            embedding_guidance: false,
            cross_injection_cutoff: 0.0,
            self_injection_cutoff: 0.0,
            guidance_scale: 2.0,
            variance_mode: VarianceMode::FixedZero,
            ..Default::default()
        };
        // Blend words that DO occur in the (identical) prompts force a
        // nonempty mask, making the check nontrivial.
        let word = prompt.split_whitespace().next().unwrap().to_string();
        let session = EditSession::new(
            scene.render(),
            PromptSpec::new(&prompt, &prompt, vec![word]),
            schedule,
            hyper,
            21,
        )
        .unwrap();
        let out = edit(&session, &model, &embedder).unwrap();
        assert_eq!(out.edited, out.reconstruction);
    }

    #[test]
    fn diagnostics_record_every_step() {
        let (model, embedder, schedule) = fixture();
        let case = crate::toy::EditCase::random(
            crate::toy::SceneSpec::random(&mut rng_from_seed(6)),
            crate::toy::EditKind::ChangeColor,
            &mut rng_from_seed(7),
        );
        let total = schedule.num_steps();
        let session = EditSession::new(
            case.source.render(),
            PromptSpec::derived(&case.source_prompt(), &case.target_prompt()),
            schedule,
            quick_hyper(),
            13,
        )
        .unwrap();
        let out = edit(&session, &model, &embedder).unwrap();
        assert_eq!(out.steps.len(), total);
        let expected: Vec<usize> = (1..=total).rev().collect();
        let got: Vec<usize> = out.steps.iter().map(|s| s.timestep).collect();
        assert_eq!(got, expected);
        // Default cutoffs: self-attention forced for the first floor(0.4 T)
        // steps, text cross-attention for floor(0.8 T).
        let self_steps = out.steps.iter().filter(|s| s.injected_self).count();
        let cross_steps = out.steps.iter().filter(|s| s.injected_cross).count();
        assert_eq!(self_steps, (0.4 * total as f64).floor() as usize);
        assert_eq!(cross_steps, (0.8 * total as f64).floor() as usize);
        for s in &out.steps {
            assert_eq!(s.saliency.dim(), (32, 32));
            assert_eq!(s.mask.blend.dim(), (32, 32));
        }
    }

    #[test]
    fn ground_once_identity_is_empty_and_runs_deterministically() {
        let (model, embedder, schedule) = fixture();
        let scene = crate::toy::SceneSpec::random(&mut rng_from_seed(8));
        let img = scene.render();
        let prompt = scene.describe();
        let identity = PromptSpec::derived(&prompt, &prompt);
        let (s, mask) = ground_once(
            &img,
            &identity,
            &model,
            &embedder,
            &schedule,
            &quick_hyper(),
            3,
            17,
        )
        .unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
        assert_eq!(mask.blend_fraction(), 0.0);

        let case = crate::toy::EditCase::random(
            scene,
            crate::toy::EditKind::ChangeColor,
            &mut rng_from_seed(9),
        );
        let spec = PromptSpec::derived(&case.source_prompt(), &case.target_prompt());
        let (a, am) = ground_once(&img, &spec, &model, &embedder, &schedule, &quick_hyper(), 3, 17).unwrap();
        let (b, bm) = ground_once(&img, &spec, &model, &embedder, &schedule, &quick_hyper(), 3, 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(am.blend, bm.blend);
    }

    use crate::rng::rng_from_seed;
}
