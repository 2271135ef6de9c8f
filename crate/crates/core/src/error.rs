use std::io;

/// Errors raised across the guidance stack.
///
/// The bracketed tag at the start of each message is stable and is what the
/// command-line tool and tests match on.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty-field: operation requires a non-empty field")]
    EmptyField,
    #[error("invalid-sigma: smoothing sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("shape: {0}")]
    Shape(String),
    #[error("bad-layer: layer {layer} outside [1, {n_layers}]")]
    BadLayer { layer: usize, n_layers: usize },
    #[error("step-overflow: step {step} is not below total steps {total}")]
    StepOverflow { step: usize, total: usize },
    #[error("mask-dim: {0}")]
    MaskDim(String),
    #[error("no-captures: separation loss needs at least one attention capture")]
    NoCaptures,
    #[error("oracle-too-large: {0} latent entries exceeds the finite-difference limit of 4096")]
    OracleTooLarge(usize),
    #[error("empty-pointset: metric requires non-empty point sets")]
    EmptyPointSet,
    #[error("empty-instances: metric requires non-empty instance sets")]
    EmptyInstances,
    #[error("no-gt-instances: ground truth has zero instances")]
    NoGtInstances,
    #[error("packing-failed: could not place instances after {0} attempts")]
    PackingFailed(usize),
    #[error("window: guided update requested outside the guided window ({0})")]
    Window(String),
    #[error("numerical-divergence: non-finite latent at step {0}")]
    Divergence(usize),
    #[error("invalid-config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
