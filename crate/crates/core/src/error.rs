//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid condition: {0}")]
    InvalidCondition(String),

    #[error("noise scale is zero (step {step}): model undefined at clean data")]
    ZeroNoiseScale { step: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("singular linear system in {0}")]
    SingularSystem(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("step index {index} out of range (schedule has {n} steps)")]
    StepOutOfRange { index: usize, n: usize },

    #[error("metric failure: {0}")]
    Metric(String),

    #[error("config error (line {line}): {reason}")]
    Config { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid_param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
