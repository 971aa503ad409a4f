//! Dual-branch diffusion image editing with adaptive per-pixel sampling
//! variance and attention-derived edit grounding.
//!
//! The crate is generic over the scalar type (`f32` for pipelines, `f64`
//! where tight numeric tolerances matter); the aliases at the crate root fix
//! the default single-precision types used by the command-line tool.

pub mod attention;
pub mod denoiser;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod eval;
pub mod grid;
pub mod grounding;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod toy;

pub use engine::{EditOutcome, EditSession, Hyperparams, PromptSpec, VarianceMode};
pub use error::{Error, Result};
pub use grid::{from_latent, to_latent, LatentGrid};
pub use rng::{derive_seed, rng_from_seed, SeedRng};
pub use scalar::Scalar;
pub use schedule::NoiseSchedule;

/// Default single-precision latent grid.
pub type Latent = LatentGrid<f32>;
/// Default single-precision schedule.
pub type Schedule = NoiseSchedule<f32>;
