//! Edit-session configuration: the prompt pair, the hyperparameters, and
//! their validity rules.

use serde::{Deserialize, Serialize};

use crate::denoiser::PromptEncoding;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::grounding::GroundingStrategy;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// How the per-step variance field for the target branch is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Full sigma inside the strict (high-saliency) mask, zero elsewhere:
    /// noise is re-injected exactly where the edit needs freedom.
    Adaptive,
    /// Zero everywhere: the target branch follows the deterministic path.
    FixedZero,
    /// Full sigma everywhere, ignoring the masks.
    FixedNonzero,
}

/// The prompt pair driving an edit, plus the words that name the change.
///
/// Blend words seed the edit-area saliency through their cross-attention
/// columns. An empty list means "nothing changes": grounding produces an
/// all-zero mask and the output reconstructs the source image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub source_prompt: String,
    pub target_prompt: String,
    pub blend_words: Vec<String>,
}

impl PromptSpec {
    pub fn new(
        source_prompt: impl Into<String>,
        target_prompt: impl Into<String>,
        blend_words: Vec<String>,
    ) -> Self {
        Self {
            source_prompt: source_prompt.into(),
            target_prompt: target_prompt.into(),
            blend_words,
        }
    }

    /// Derive the blend words from the prompt pair itself: words differing
    /// at the same position when the prompts are equally long, otherwise the
    /// symmetric difference of the two word sets. Identical prompts yield no
    /// blend words (the identity edit).
    pub fn derived(source_prompt: impl Into<String>, target_prompt: impl Into<String>) -> Self {
        let source_prompt = source_prompt.into();
        let target_prompt = target_prompt.into();
        let src: Vec<String> = words_of(&source_prompt);
        let tgt: Vec<String> = words_of(&target_prompt);
        let mut blend_words = Vec::new();
        let mut push_unique = |w: &str| {
            if !blend_words.iter().any(|x: &String| x == w) {
                blend_words.push(w.to_string());
            }
        };
        if src.len() == tgt.len() {
            for (a, b) in src.iter().zip(tgt.iter()) {
                if a != b {
                    push_unique(a);
                    push_unique(b);
                }
            }
        } else {
            for w in src.iter().filter(|w| !tgt.contains(w)) {
                push_unique(w);
            }
            for w in tgt.iter().filter(|w| !src.contains(w)) {
                push_unique(w);
            }
        }
        Self {
            source_prompt,
            target_prompt,
            blend_words,
        }
    }

    /// Positions of the blend words inside an encoded prompt
    /// (case-insensitive whole-token matches, every occurrence). A word that
    /// only appears in the other prompt simply contributes no position here.
    pub fn resolve<S>(&self, encoding: &PromptEncoding<S>) -> Vec<usize> {
        let wanted: Vec<String> = self.blend_words.iter().map(|w| w.to_lowercase()).collect();
        encoding
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, tok)| wanted.iter().any(|w| w == &tok.to_lowercase()))
            .map(|(i, _)| i)
            .collect()
    }

    /// Error unless every blend word occurs in at least one of the prompts.
    pub fn validate(&self) -> Result<()> {
        let src = words_of(&self.source_prompt);
        let tgt = words_of(&self.target_prompt);
        for word in &self.blend_words {
            let w = word.to_lowercase();
            if w.is_empty() {
                return Err(Error::invalid("blend word is empty"));
            }
            if !src.contains(&w) && !tgt.contains(&w) {
                return Err(Error::invalid(format!(
                    "blend word {word:?} does not occur in either prompt"
                )));
            }
        }
        Ok(())
    }

    /// Whether this is the identity edit (no blend words).
    pub fn is_identity(&self) -> bool {
        self.blend_words.is_empty()
    }
}

fn words_of(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// All scalar knobs of an edit run.
///
/// `validate` enforces the documented ranges; [`Hyperparams::default`] is the
/// recommended operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Image-conditioning strength fed to the denoiser's decoupled image
    /// cross-attention. Must be >= 0; 0 disables the image pathway.
    pub conditioning_weight: f64,
    /// Loose saliency threshold: at or above it a pixel belongs to the
    /// editing area kept from the target branch.
    pub blend_threshold: f64,
    /// Strict saliency threshold for the sub-region that receives sampling
    /// noise. Must exceed `blend_threshold`.
    pub variance_threshold: f64,
    /// Saliency-refinement mixing weight: 1 keeps the raw map, 0 replaces it
    /// with its self-attention propagation each iteration.
    pub refine_mix: f64,
    /// Number of refinement iterations.
    pub refine_iters: usize,
    /// Scale on the target branch's per-pixel sigma, in `[0, 1]`. The source
    /// branch always replays under the schedule's own sigma so its
    /// reconstruction stays exact.
    pub variance_scale: f64,
    /// Fraction of the sampling steps (from the start) during which the
    /// source branch's text cross-attention maps are forced into the target.
    pub cross_injection_cutoff: f64,
    /// Same for self-attention maps.
    pub self_injection_cutoff: f64,
    /// Classifier-free guidance scale; 1 disables the unconditional pass.
    pub guidance_scale: f64,
    /// Fraction of each step's fresh saliency mixed into the running
    /// average, in `(0, 1]`; 1 disables smoothing.
    pub saliency_smoothing: f64,
    /// Rescale the estimated target image embedding back to the source
    /// embedding's norm.
    pub renormalize_estimate: bool,
    /// How the target branch's variance field is built.
    pub variance_mode: VarianceMode,
    /// How the edited region is grounded.
    pub grounding: GroundingStrategy,
    /// Whether image-embedding conditioning is used at all. Off, both
    /// branches run on text conditioning alone.
    pub embedding_guidance: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            conditioning_weight: 0.4,
            blend_threshold: 0.5,
            variance_threshold: 0.8,
            refine_mix: 0.5,
            refine_iters: 5,
            variance_scale: 1.0,
            cross_injection_cutoff: 0.8,
            self_injection_cutoff: 0.4,
            guidance_scale: 7.5,
            saliency_smoothing: 0.3,
            renormalize_estimate: false,
            variance_mode: VarianceMode::Adaptive,
            grounding: GroundingStrategy::Refined,
            embedding_guidance: true,
        }
    }
}

impl Hyperparams {
    /// Check every field against its documented range.
    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| -> Result<()> {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite, got {v}")));
            }
            Ok(())
        };
        finite("conditioning_weight", self.conditioning_weight)?;
        if self.conditioning_weight < 0.0 {
            return Err(Error::invalid(format!(
                "conditioning_weight must be >= 0, got {}",
                self.conditioning_weight
            )));
        }
        finite("blend_threshold", self.blend_threshold)?;
        finite("variance_threshold", self.variance_threshold)?;
        if !(self.blend_threshold > 0.0
            && self.blend_threshold < self.variance_threshold
            && self.variance_threshold <= 1.0)
        {
            return Err(Error::invalid(format!(
                "need 0 < blend_threshold ({}) < variance_threshold ({}) <= 1",
                self.blend_threshold, self.variance_threshold
            )));
        }
        finite("refine_mix", self.refine_mix)?;
        if !(0.0..=1.0).contains(&self.refine_mix) {
            return Err(Error::invalid(format!(
                "refine_mix must lie in [0, 1], got {}",
                self.refine_mix
            )));
        }
        finite("variance_scale", self.variance_scale)?;
        if !(0.0..=1.0).contains(&self.variance_scale) {
            return Err(Error::invalid(format!(
                "variance_scale must lie in [0, 1], got {}",
                self.variance_scale
            )));
        }
        for (name, v) in [
            ("cross_injection_cutoff", self.cross_injection_cutoff),
            ("self_injection_cutoff", self.self_injection_cutoff),
        ] {
            finite(name, v)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        finite("guidance_scale", self.guidance_scale)?;
        if self.guidance_scale < 0.0 {
            return Err(Error::invalid(format!(
                "guidance_scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        finite("saliency_smoothing", self.saliency_smoothing)?;
        if !(self.saliency_smoothing > 0.0 && self.saliency_smoothing <= 1.0) {
            return Err(Error::invalid(format!(
                "saliency_smoothing must lie in (0, 1], got {}",
                self.saliency_smoothing
            )));
        }
        Ok(())
    }
}

/// Everything one edit run needs besides the models.
#[derive(Debug, Clone)]
pub struct EditSession<S> {
    /// Source image in `[0, 1]` units.
    pub source_image: LatentGrid<S>,
    pub prompts: PromptSpec,
    pub schedule: NoiseSchedule<S>,
    pub hyperparams: Hyperparams,
    pub seed: u64,
}

impl<S: Scalar> EditSession<S> {
    /// Assemble and validate a session.
    pub fn new(
        source_image: LatentGrid<S>,
        prompts: PromptSpec,
        schedule: NoiseSchedule<S>,
        hyperparams: Hyperparams,
        seed: u64,
    ) -> Result<Self> {
        let session = Self {
            source_image,
            prompts,
            schedule,
            hyperparams,
            seed,
        };
        session.validate()?;
        Ok(session)
    }

    /// Re-check the invariants (fields are public and may have been edited).
    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.prompts.validate()?;
        let out_of_range = self
            .source_image
            .data()
            .iter()
            .any(|v| v.to_real() < 0.0 || v.to_real() > 1.0);
        if out_of_range {
            return Err(Error::invalid(
                "source image must be in [0, 1] units (got out-of-range values; pass the image, not a latent)",
            ));
        }
        Ok(())
    }
}
