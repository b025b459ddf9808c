use thiserror::Error;

/// Errors surfaced by tensor construction, op execution, and backward.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes disagree with what the op requires.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// A hyperparameter or argument is outside its legal range.
    #[error("invalid parameter: {0}")]
    Param(String),
    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;
