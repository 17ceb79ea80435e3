use thiserror::Error;

/// Errors raised anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("statistic gradient vanishes (norm {norm:e}); threshold is not a regular value here")]
    NonRegularPoint { norm: f64 },

    #[error("ray from the MAP never reaches the threshold {xi}")]
    RayEscape { xi: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("chain {chain}: every proposal rejected during adaptation")]
    StepSizeUnderflow { chain: usize },

    #[error("trace is constant; effective sample size is undefined")]
    ConstantTrace,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
