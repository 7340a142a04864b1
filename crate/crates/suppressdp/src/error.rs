use thiserror::Error;

/// Errors returned across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("value {value} in dimension {dim} outside bounds [{lower}, {upper}]")]
    OutOfBounds {
        dim: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("database is empty")]
    EmptyDatabase,

    #[error("database has {size} records, limit is {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("privacy loss is infinite: {0}")]
    Infinite(String),

    #[error("support condition violated: {0}")]
    SupportViolation(String),

    #[error("kernel mismatch: {0}")]
    KernelMismatch(String),

    #[error("probabilities not normalized (total {0})")]
    NotNormalized(f64),

    #[error("monotonicity violated: {0}")]
    NonMonotone(String),

    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
