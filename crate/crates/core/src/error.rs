use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("worker failure: {0}")]
    Worker(String),

    #[error("iteration budget exhausted after {iterations} iterations")]
    BudgetExceeded {
        iterations: usize,
        trace: Box<crate::curriculum::CurriculumTrace>,
    },

    #[error("replay mismatch at step {step}: {message}")]
    ReplayMismatch { step: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
