use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("context overflow: prefix length {len} exceeds context window {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate prompt id {id:?} at line {line}")]
    DuplicatePrompt { id: String, line: usize },

    #[error("record already stored: {0}")]
    KeyCollision(String),

    #[error("metric kind mismatch: {left} vs {right}")]
    MetricMismatch { left: String, right: String },

    #[error("metric {0} unavailable: no token log-probability data")]
    MetricUnavailable(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("backend error (status {status:?}) after {attempts} attempt(s): {message}")]
    Backend {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },

    #[error("authentication failed (status {status}): {message}")]
    Auth { status: u16, message: String },

    #[error("missing environment variable {0}")]
    MissingApiKey(String),

    #[error("missing store slices; run these first:\n{0}")]
    MissingSlices(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
