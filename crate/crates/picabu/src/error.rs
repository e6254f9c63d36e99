//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the picabu library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Array or grid dimensions do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A non-finite value appeared during training; `block` names the
    /// parameter block or objective term that produced it.
    #[error("training failure in `{block}`: {reason}")]
    Training { block: String, reason: String },

    /// The objective grew past the divergence guard.
    #[error("objective diverged: {0}")]
    Divergence(String),

    /// The particle filter could not select a proposal.
    #[error("filter failure at step {step}: {reason}")]
    Filter { step: usize, reason: String },

    /// A file did not match the expected container layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
