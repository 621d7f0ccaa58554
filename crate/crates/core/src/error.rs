//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition (non-finite value, bad id, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A trajectory is too short to carve the requested path from it.
    #[error("insufficient trajectory length: need {needed:.3} m of arc, have {got:.3} m")]
    InsufficientLength { needed: f64, got: f64 },

    /// Tensor or sequence dimensions do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// The requested scene cannot be realized (e.g. a U-turn on a
    /// single-lane straight).
    #[error("unsatisfiable scene spec: {0}")]
    Unsatisfiable(String),

    /// A configuration file or value is malformed.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called on a model variant that does not support it.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss; carries diagnostics.
    #[error("training aborted: {0}")]
    TrainingAbort(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
