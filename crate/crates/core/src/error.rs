//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// A scalar argument is outside its legal range.
    #[error("invalid parameter {name}: {details}")]
    Param { name: &'static str, details: String },

    /// Input data violates a precondition (wrong length, non-distribution labels, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Experiment configuration is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container is unreadable or from an unknown format version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (non-finite loss, empty dataset, ...).
    #[error("training error: {0}")]
    Train(String),

    /// Dataset manifest or generation problem.
    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub fn param(name: &'static str, details: impl Into<String>) -> Self {
        Error::Param {
            name,
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
