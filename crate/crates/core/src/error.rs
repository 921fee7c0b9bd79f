use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape, range or argument precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A node from another tape (or from before a reset) reached an op or backward.
    #[error("graph integrity: {0}")]
    GraphIntegrity(String),

    /// A binary file failed to parse.
    #[error("format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Phantom construction failed after bounded retries.
    #[error("phantom generation failed for seed {seed}: {detail}")]
    Generation { seed: u64, detail: String },

    /// A loss or gradient went non-finite during training.
    #[error("numerical abort at step {step}: term {term} is non-finite (max |grad| = {max_grad:e})")]
    NonFinite {
        step: u64,
        term: String,
        max_grad: f64,
    },

    /// Evaluation could not be carried out on the given data.
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            field,
            detail: detail.into(),
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
