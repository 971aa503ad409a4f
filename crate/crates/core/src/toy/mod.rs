//! Self-contained toy backend: parametric scenes, a small attention
//! denoiser, a joint image/text embedder, and closed-form oracles.
//!
//! Everything trains on CPU in seconds to minutes, which makes full
//! edit-pipeline behavior testable end to end.

pub mod corpus;
pub mod denoiser;
pub mod embedder;
pub mod nn;
pub mod oracle;
pub mod scene;
pub mod train;

pub use corpus::{training_scenes, Corpus, CorpusItem};
pub use denoiser::{ToyDenoiser, ToyDenoiserConfig, SELF_ATTENTION_BLOCK, TEXT_CROSS_BLOCK};
pub use embedder::{train_toy_embedder, EmbedderTrainOpts, ToyEmbedderConfig, ToyJointEmbedder, TrainingStats};
pub use oracle::GaussianOracle;
pub use scene::{EditCase, EditKind, SceneSpec};
pub use train::{train_toy_denoiser, DenoiserTrainOpts};
