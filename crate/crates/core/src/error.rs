use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SiderError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no data: {0}")]
    NoData(String),

    #[error("need ≥2 identities for verification pairs (found {0})")]
    TooFewIdentities(usize),

    #[error("insufficient pairs: {found} impostor pairs, need at least {needed}")]
    InsufficientPairs { found: usize, needed: usize },

    #[error("timestep {0} is already denoised")]
    AlreadyDenoised(usize),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("degenerate gradient: zero L1 norm")]
    DegenerateGradient,

    #[error("non-finite gradient at attack iteration {iteration} (loss {loss})")]
    NonFiniteGradient { iteration: usize, loss: f64 },

    #[error("training diverged in {what} at step {step}: loss {loss}")]
    TrainingDiverged { what: String, step: usize, loss: f64 },

    #[error("seeds must differ")]
    SeedsMustDiffer,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),

    #[error("mask file not found: {0}")]
    MaskNotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SiderError> = std::result::Result<T, E>;
