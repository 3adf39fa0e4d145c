use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulation, detection and training routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-integer column weight: k*m/n = {k}*{m}/{n} is not an integer")]
    NonIntegerColumnWeight { m: usize, n: usize, k: usize },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("signature matrix has zero Frobenius norm")]
    ZeroMatrix,

    #[error("invalid SNR {0}: linear SNR must be positive and finite")]
    InvalidSnr(f64),

    #[error("non-finite detector state at iteration {iteration}")]
    NonFiniteState { iteration: usize },

    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("shape mismatch: expected {expected} parameters, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite loss in generation {generation}, mini-batch {batch}: {detail}")]
    NonFiniteLoss {
        generation: usize,
        batch: usize,
        detail: String,
    },

    #[error("exhaustive search over {n} users is too large (limit {limit})")]
    TooLarge { n: usize, limit: usize },

    #[error("missing STPG checkpoint for SNR {snr_db} dB")]
    MissingCheckpoint { snr_db: f64 },

    #[error("duplicate-free Gallager mask not found after {0} shuffles")]
    ConstructionFailed(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::NonIntegerColumnWeight { .. } | Error::InvalidDimension(_) | Error::InvalidSnr(_) | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
