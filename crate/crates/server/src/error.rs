use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] prefpaint_core::Error),
    #[error("task queue is shut down")]
    Unavailable,
    #[error("data directory {0} is in use by another process")]
    DataDirLocked(std::path::PathBuf),
    #[error("corrupt task log line {line}: {reason}")]
    TaskLog { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Core(prefpaint_core::Error::Validation(msg.into()))
    }

    pub fn not_found(msg: impl Into<String>) -> Self {
        Error::Core(prefpaint_core::Error::NotFound(msg.into()))
    }

    pub fn conflict(msg: impl Into<String>) -> Self {
        Error::Core(prefpaint_core::Error::Conflict(msg.into()))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
