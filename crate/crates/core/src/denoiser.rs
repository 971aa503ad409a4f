//! The denoising-model abstraction the editing engine drives.
//!
//! The engine never touches model internals: it hands a [`DenoiserInput`]
//! describing the latent, the conditioning, and any attention maps to force,
//! and receives the noise prediction plus the maps the pass computed itself.

use ndarray::Array1;

use crate::attention::AttentionBundle;
use crate::embedding::EmbeddingVector;
use crate::error::Result;
use crate::grid::LatentGrid;
use crate::scalar::Scalar;

/// A prompt in the denoiser's own token space.
#[derive(Debug, Clone)]
pub struct PromptEncoding<S> {
    /// Normalized token strings, one per row of `embeddings`.
    pub tokens: Vec<String>,
    /// Per-token embedding rows consumed by text cross-attention.
    pub embeddings: ndarray::Array2<S>,
}

impl<S> PromptEncoding<S> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Image-side conditioning: a joint-space embedding plus its strength.
///
/// With `weight == 0` a denoiser must skip the image pathway entirely and
/// produce output bitwise equal to running without conditioning.
#[derive(Debug, Clone)]
pub struct ImageConditioning<S> {
    pub embedding: EmbeddingVector<S>,
    pub weight: S,
}

impl<S: Scalar> ImageConditioning<S> {
    pub fn new(embedding: EmbeddingVector<S>, weight: S) -> Self {
        Self { embedding, weight }
    }

    /// The raw conditioning vector.
    pub fn vector(&self) -> &Array1<S> {
        self.embedding.values()
    }
}

/// Everything a denoiser needs for one conditioned pass.
#[derive(Debug)]
pub struct DenoiserInput<'a, S> {
    pub latent: &'a LatentGrid<S>,
    /// Current timestep, `1..=total_steps`.
    pub timestep: usize,
    /// Length of the sampling schedule; the model conditions on
    /// `timestep / total_steps`.
    pub total_steps: usize,
    pub prompt: &'a PromptEncoding<S>,
    pub image: Option<&'a ImageConditioning<S>>,
    /// Maps to force instead of the pass's own, matched by kind and block.
    pub injected: Option<&'a AttentionBundle<S>>,
}

/// A conditional denoising model with attention capture and injection.
pub trait Denoiser<S: Scalar> {
    /// Tokenize and embed a prompt. The empty string yields the
    /// unconditional encoding (a single null token).
    fn encode_prompt(&self, prompt: &str) -> Result<PromptEncoding<S>>;

    /// Predict the noise in `input.latent` and report the attention maps of
    /// this pass.
    ///
    /// The returned bundle always holds the maps the pass computed itself,
    /// even at sites where `input.injected` overrode them, so capture is
    /// injection-independent. Implementations must be pure functions of
    /// their input.
    fn predict_noise(&self, input: &DenoiserInput<'_, S>) -> Result<(LatentGrid<S>, AttentionBundle<S>)>;

    /// `(height, width, channels)` of the latents this model accepts.
    fn latent_shape(&self) -> (usize, usize, usize);
}
