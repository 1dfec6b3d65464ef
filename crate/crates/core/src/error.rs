use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty truncation [{lower}, {upper}]")]
    EmptyTruncation { lower: f64, upper: f64 },

    #[error("empty input")]
    EmptyInput,

    /// 1-based index of the pivot that was not strictly positive.
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("particle system died")]
    ParticleSystemDied,

    #[error("infeasible point: coordinate {coordinate} has empty conditional [{lower}, {upper}]")]
    InfeasiblePoint {
        coordinate: usize,
        lower: f64,
        upper: f64,
    },

    #[error("bounce cap exceeded ({cap} reflections)")]
    BounceCapExceeded { cap: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
