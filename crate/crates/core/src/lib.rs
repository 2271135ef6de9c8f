//! Training-free instance separation guidance for a toy joint-attention
//! denoiser, plus the spatial-fidelity metrics and synthetic scenes used to
//! evaluate it.

pub mod condition;
pub mod denoiser;
pub mod error;
pub mod field;
pub mod isg;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod sgu;
pub mod vae;

pub use error::{Error, Result};
