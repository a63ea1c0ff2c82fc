use thiserror::Error;

/// Errors produced by the sampler and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("need {needed} samples, only {available} available")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("rank-deficient local regression (condition ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("forward model failed: {0}")]
    ModelFailure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that a refinement of the sample set can cure.
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. } | Error::InsufficientSamples { .. } | Error::Factorization(_)
        )
    }
}

/// Coarse error classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Config,
    Model,
    Numerical,
    Other,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Model => 3,
            ErrorCategory::Numerical => 4,
            ErrorCategory::Other => 1,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::ModelFailure(_) => ErrorCategory::Model,
            Error::NonFinite(_)
            | Error::InsufficientSamples { .. }
            | Error::RankDeficient { .. }
            | Error::Factorization(_) => ErrorCategory::Numerical,
            _ => ErrorCategory::Other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
