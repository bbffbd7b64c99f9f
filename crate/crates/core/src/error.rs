use thiserror::Error;

/// Errors surfaced by grid construction, kernel sampling and the solvers.
#[derive(Debug, Error)]
pub enum SvieError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid kernel spec: {0}")]
    InvalidKernel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of domain: {0}")]
    OutOfDomain(String),

    #[error("non-finite value at (i={i}, j={j}): numerical blow-up at this grid")]
    NonFinite { i: usize, j: usize },

    #[error("grid too coarse: a single step already violates the partition bound")]
    GridTooCoarse,

    #[error("empty field")]
    EmptyField,

    #[error("unsupported data: {0}")]
    Unsupported(String),

    #[error("expression error: {0}")]
    Expr(String),
}

pub type Result<T> = std::result::Result<T, SvieError>;
