//! Locating the edited region from attention maps.
//!
//! Cross-attention columns for the edited prompt words give a coarse saliency
//! map over spatial patches. That map is sharpened by propagating it through
//! the model's own self-attention matrix — patches that attend to salient
//! patches become salient too — then upsampled to pixel resolution and
//! thresholded into binary masks. Two thresholds produce two masks: a loose
//! one deciding where the branches are blended, and a strict one deciding
//! where fresh noise may be injected.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBundle, AttentionKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the edited-region saliency is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundingStrategy {
    /// Cross-attention saliency refined through self-attention propagation.
    Refined,
    /// Raw cross-attention saliency only (the baseline the refinement is
    /// measured against).
    CrossAttentionOnly,
}

/// Saliency over the edited prompt words, averaged across all captured
/// cross-attention records and reduced to one value per spatial patch by
/// taking the maximum over the selected word columns. The result is min-max
/// normalized to `[0, 1]`; a perfectly flat map (no signal) comes back as all
/// zeros.
pub fn initial_saliency<S: Scalar>(
    bundle: &AttentionBundle<S>,
    token_indices: &[usize],
) -> Result<Array2<S>> {
    let records = bundle.of_kind(AttentionKind::TextCross);
    if records.is_empty() {
        return Err(Error::invalid("no cross-attention records to ground from"));
    }
    if token_indices.is_empty() {
        return Err(Error::invalid("no edited token indices given"));
    }
    let (n_patches, n_tokens) = records[0].weights.dim();
    for r in &records {
        if r.weights.dim() != (n_patches, n_tokens) {
            return Err(Error::shape(
                "cross-attention record",
                &[n_patches, n_tokens],
                &[r.weights.nrows(), r.weights.ncols()],
            ));
        }
    }
    if let Some(&bad) = token_indices.iter().find(|&&i| i >= n_tokens) {
        return Err(Error::invalid(format!(
            "edited token index {bad} out of range for {n_tokens} prompt tokens"
        )));
    }
    let side = patch_side(n_patches)?;

    let scale = S::one() / S::from_real(records.len() as f64);
    let mut per_patch = Array1::<S>::from_elem(n_patches, S::neg_infinity());
    for p in 0..n_patches {
        for &tok in token_indices {
            let mut avg = S::zero();
            for r in &records {
                avg += r.weights[[p, tok]];
            }
            avg *= scale;
            if avg > per_patch[p] {
                per_patch[p] = avg;
            }
        }
    }

    let lo = per_patch.iter().cloned().fold(S::infinity(), S::min);
    let hi = per_patch.iter().cloned().fold(S::neg_infinity(), S::max);
    let span = hi - lo;
    let grid = Array2::from_shape_fn((side, side), |(r, c)| per_patch[r * side + c]);
    if span <= S::zero() {
        log::warn!("cross-attention saliency is flat; grounding carries no signal");
        return Ok(Array2::zeros((side, side)));
    }
    Ok(grid.mapv(|v| (v - lo) / span))
}

/// Average of all captured self-attention records, rows renormalized to sum
/// to one so the result is a proper transition matrix over patches.
pub fn build_interpatch_matrix<S: Scalar>(bundle: &AttentionBundle<S>) -> Result<Array2<S>> {
    let records = bundle.of_kind(AttentionKind::SelfAttention);
    if records.is_empty() {
        return Err(Error::invalid("no self-attention records to build the inter-patch matrix"));
    }
    let dim = records[0].weights.dim();
    if dim.0 != dim.1 {
        return Err(Error::shape(
            "self-attention record",
            &[dim.0, dim.0],
            &[dim.0, dim.1],
        ));
    }
    let mut avg = Array2::<S>::zeros(dim);
    for r in &records {
        if r.weights.dim() != dim {
            return Err(Error::shape(
                "self-attention record",
                &[dim.0, dim.1],
                &[r.weights.nrows(), r.weights.ncols()],
            ));
        }
        avg += &r.weights;
    }
    avg /= S::from_real(records.len() as f64);
    for mut row in avg.rows_mut() {
        let sum: S = row.iter().cloned().sum();
        if sum <= S::zero() {
            return Err(Error::invalid("self-attention row sums to zero"));
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(avg)
}

/// Iterative saliency propagation: `s_i = mix * s_{i-1} + (1 - mix) * Q s_{i-1}`,
/// run `iters` times with `Q` the inter-patch matrix. `mix` must lie in
/// `[0, 1]`; the saliency grid is flattened row-major to match `Q`'s token
/// order.
pub fn refine_saliency<S: Scalar>(
    saliency: &Array2<S>,
    interpatch: &Array2<S>,
    mix: f64,
    iters: usize,
) -> Result<Array2<S>> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::invalid(format!("refinement mix {mix} outside [0, 1]")));
    }
    let (h, w) = saliency.dim();
    let n = h * w;
    if interpatch.dim() != (n, n) {
        return Err(Error::shape(
            "inter-patch matrix",
            &[n, n],
            &[interpatch.nrows(), interpatch.ncols()],
        ));
    }
    let gamma = S::from_real(mix);
    let one_minus = S::one() - gamma;
    let mut s = Array1::from_iter(saliency.iter().cloned());
    for _ in 0..iters {
        let propagated = interpatch.dot(&s);
        s = s * gamma + &(propagated * one_minus);
    }
    Ok(Array2::from_shape_fn((h, w), |(r, c)| s[r * w + c]))
}

/// Bilinear upsample with corner alignment. Refusing to downsample keeps the
/// call sites honest about which direction resolution flows; same-size input
/// is returned unchanged.
pub fn upsample_saliency<S: Scalar>(
    saliency: &Array2<S>,
    new_height: usize,
    new_width: usize,
) -> Result<Array2<S>> {
    let (h, w) = saliency.dim();
    if h == 0 || w == 0 || new_height == 0 || new_width == 0 {
        return Err(Error::invalid("empty saliency map"));
    }
    if new_height < h || new_width < w {
        return Err(Error::invalid(format!(
            "refusing to downsample saliency from {h}x{w} to {new_height}x{new_width}"
        )));
    }
    if (new_height, new_width) == (h, w) {
        return Ok(saliency.clone());
    }
    let scale = |n_new: usize, n_old: usize| -> f64 {
        if n_new == 1 {
            0.0
        } else {
            (n_old - 1) as f64 / (n_new - 1) as f64
        }
    };
    let sy = scale(new_height, h);
    let sx = scale(new_width, w);
    let mut out = Array2::zeros((new_height, new_width));
    for r in 0..new_height {
        let fy = r as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = S::from_real(fy - y0 as f64);
        for c in 0..new_width {
            let fx = c as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = S::from_real(fx - x0 as f64);
            let top = saliency[[y0, x0]] * (S::one() - wx) + saliency[[y0, x1]] * wx;
            let bot = saliency[[y1, x0]] * (S::one() - wx) + saliency[[y1, x1]] * wx;
            out[[r, c]] = top * (S::one() - wy) + bot * wy;
        }
    }
    Ok(out)
}

/// Element-wise maximum of two saliency maps (source and target branch).
pub fn combine_saliency<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> Result<Array2<S>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "saliency pair",
            &[a.nrows(), a.ncols()],
            &[b.nrows(), b.ncols()],
        ));
    }
    Ok(ndarray::Zip::from(a).and(b).map_collect(|&x, &y| x.max(y)))
}

/// Pixels whose saliency reaches `threshold` (inclusive).
pub fn threshold_mask<S: Scalar>(saliency: &Array2<S>, threshold: f64) -> Array2<bool> {
    let t = S::from_real(threshold);
    saliency.mapv(|v| v >= t)
}

/// One-call grounding tail: combine both branches' refined saliency with an
/// elementwise max, upsample to latent resolution, and threshold twice.
/// Returns the upsampled saliency together with the mask pair.
pub fn combine_and_mask<S: Scalar>(
    saliency_src: &Array2<S>,
    saliency_tgt: &Array2<S>,
    blend_threshold: f64,
    variance_threshold: f64,
    latent_height: usize,
    latent_width: usize,
) -> Result<(Array2<S>, EditMask)> {
    let combined = combine_saliency(saliency_src, saliency_tgt)?;
    let up = upsample_saliency(&combined, latent_height, latent_width)?;
    let mask = EditMask::from_saliency(&up, blend_threshold, variance_threshold)?;
    Ok((up, mask))
}

/// The two binary masks driving an edit step.
#[derive(Debug, Clone)]
pub struct EditMask {
    /// Loose mask: where the target branch's latent is kept (elsewhere the
    /// source branch shows through).
    pub blend: Array2<bool>,
    /// Strict mask: where per-step noise is re-enabled.
    pub variance: Array2<bool>,
}

impl EditMask {
    /// Threshold one saliency map twice. Requires
    /// `0 < blend_threshold < variance_threshold <= 1` so the strict mask is
    /// a subset of the loose one.
    pub fn from_saliency<S: Scalar>(
        saliency: &Array2<S>,
        blend_threshold: f64,
        variance_threshold: f64,
    ) -> Result<Self> {
        if !(blend_threshold > 0.0 && blend_threshold < variance_threshold && variance_threshold <= 1.0)
        {
            return Err(Error::invalid(format!(
                "need 0 < blend ({blend_threshold}) < variance ({variance_threshold}) <= 1"
            )));
        }
        Ok(Self {
            blend: threshold_mask(saliency, blend_threshold),
            variance: threshold_mask(saliency, variance_threshold),
        })
    }

    pub fn blend_fraction(&self) -> f64 {
        fraction(&self.blend)
    }

    pub fn variance_fraction(&self) -> f64 {
        fraction(&self.variance)
    }
}

fn fraction(mask: &Array2<bool>) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|v| **v).count() as f64 / mask.len() as f64
}

/// Exponential smoothing of per-step saliency across the sampling loop.
#[derive(Debug, Clone)]
pub struct SaliencyTracker<S> {
    ema: Option<Array2<S>>,
    new_weight: f64,
}

impl<S: Scalar> SaliencyTracker<S> {
    /// `new_weight` is the fraction of each fresh observation mixed into the
    /// running average (1.0 means no smoothing).
    pub fn new(new_weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&new_weight) || new_weight == 0.0 {
            return Err(Error::invalid(format!(
                "smoothing weight {new_weight} outside (0, 1]"
            )));
        }
        Ok(Self {
            ema: None,
            new_weight,
        })
    }

    /// Fold in one observation and return the smoothed map.
    pub fn update(&mut self, observation: &Array2<S>) -> Result<&Array2<S>> {
        match &mut self.ema {
            None => self.ema = Some(observation.clone()),
            Some(ema) => {
                if ema.dim() != observation.dim() {
                    return Err(Error::shape(
                        "saliency observation",
                        &[ema.nrows(), ema.ncols()],
                        &[observation.nrows(), observation.ncols()],
                    ));
                }
                let w = S::from_real(self.new_weight);
                let keep = S::one() - w;
                ndarray::Zip::from(ema)
                    .and(observation)
                    .for_each(|e, &o| *e = keep * *e + w * o);
            }
        }
        Ok(self.ema.as_ref().expect("just set"))
    }

    pub fn current(&self) -> Option<&Array2<S>> {
        self.ema.as_ref()
    }
}

fn patch_side(n_patches: usize) -> Result<usize> {
    let side = (n_patches as f64).sqrt().round() as usize;
    if side * side != n_patches {
        return Err(Error::invalid(format!(
            "{n_patches} patches do not form a square grid"
        )));
    }
    Ok(side)
}
