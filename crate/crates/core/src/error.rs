use thiserror::Error;

/// Errors raised by the inference, learning and persistence routines.
#[derive(Debug, Error)]
pub enum DpcnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("column {0} has (near) zero norm")]
    ZeroColumn(usize),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("frame of {height}x{width} cannot be split into a {rows}x{cols} grid")]
    GridMismatch {
        height: usize,
        width: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("labelings have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("empty vector")]
    EmptyVector,

    #[error("invalid cluster count k={k} for {points} points")]
    InvalidK { k: usize, points: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("model file format error: {0}")]
    Format(String),

    #[error("model shape error: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DpcnError>;
