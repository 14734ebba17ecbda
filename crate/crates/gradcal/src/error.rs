//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/operand shapes do not agree.
    #[error("shape mismatch in {context}: {left} vs {right}")]
    Shape {
        context: String,
        left: String,
        right: String,
    },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// API misuse (bad tag, root not on tape, non-finite factor, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input is degenerate for the requested computation (zero gradient, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A loss or metric became non-finite during training.
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    /// Metric is undefined (e.g. zero baseline in a relative drop).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// I/O failure, with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (config, checkpoint, metrics).
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn shape(context: impl Into<String>, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
