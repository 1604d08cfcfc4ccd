//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument fell outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector/matrix dimensions do not line up.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A matrix that must be inverted is numerically singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A matrix that must be positive semidefinite is not.
    #[error("not positive semidefinite: {0}")]
    NotPsd(String),

    /// A computation produced NaN or infinity outside an integration loop.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A trajectory or sampler left the representable range.
    #[error("divergence at step {step}: {context}")]
    Divergence { step: usize, context: String },

    /// Invalid configuration detected at construction/validation time.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Training aborted (non-finite loss, degenerate split, ...).
    #[error("training failed at epoch {epoch}: {context}")]
    Training { epoch: usize, context: String },

    /// Checkpoint file is missing, truncated or has the wrong layout.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

/// Checks a dimension pair, returning a uniform error.
pub fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
