//! File formats: PNGs, model checkpoints, and noise traces.

pub mod checkpoint;
pub mod png;
pub mod trace;
mod wire;
