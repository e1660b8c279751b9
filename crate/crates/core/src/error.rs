use thiserror::Error;

/// Errors raised by the core model, optimizer and registry.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("timestep {t} out of range 1..={max}")]
    TimestepRange { t: usize, max: usize },
    #[error("unknown prompt index {index} (vocabulary has {vocab} tokens)")]
    UnknownPrompt { index: usize, vocab: usize },
    #[error("unknown prompt token {0:?}")]
    UnknownToken(String),
    #[error("degenerate variance at timestep {0}: the final step carries no density")]
    DegenerateVariance(usize),
    #[error("nothing to inpaint: mask has no hole pixels")]
    NothingToInpaint,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("pair error: {0}")]
    Pair(String),
    #[error("feedback error: {0}")]
    Feedback(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt blob {hash}: {reason}")]
    Corruption { hash: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::registry::CheckpointError),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
