use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("numeric error in {context}: {reason}")]
    Numeric { context: String, reason: String },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("sampler: {0}")]
    Sampler(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            reason: reason.into(),
        }
    }
}
