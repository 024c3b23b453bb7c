use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The input violates a documented precondition.
    #[error("rejected input: {0}")]
    Rejected(String),

    /// A numerical routine failed to produce a trustworthy answer.
    #[error("numerical failure: {0}")]
    Diagnostic(String),

    /// A simulation state became unphysical (NaN, non-positive warping, ...).
    #[error("corrupted state: {0}")]
    Corrupted(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn reject<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Rejected(msg.into()))
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LabError::DimensionMismatch { expected, got })
    }
}
