//! Error type shared by every module of the crate.

use std::io;

use thiserror::Error;

/// Errors produced by the head-stage model and its offline toolchain.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is outside its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A file did not match the expected layout.
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    /// Input data violates a precondition (unsorted streams, missing classes, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Model parameters are inconsistent or cannot be quantized.
    #[error("model error: {0}")]
    Model(String),

    /// Training diverged.
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    /// No candidate satisfied a selection constraint.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
