use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine, its file formats and experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector contains a non-finite entry")]
    NonFinite,
    #[error("vector has no entries")]
    EmptyVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty class: {0}")]
    EmptyClass(String),
    #[error("vocabulary has {available} entries but {requested} negatives were requested")]
    VocabularyTooSmall { available: usize, requested: usize },
    #[error("{negatives} negatives cannot be split into {groups} groups")]
    TooFewNegatives { negatives: usize, groups: usize },
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("initialization sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("no static negatives available")]
    EmptyNegatives,
    #[error("inversion loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("buffer selection ratio must lie in [0, 1], got {0}")]
    InvalidRho(f64),
    #[error("activation totals differ: {left} vs {right}")]
    TotalMismatch { left: f64, right: f64 },
    #[error("positive activation must be > 0, got {0}")]
    NonPositiveP(f64),
    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for this error: 1 validation, 2 I/O, 3 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::Invariant(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
