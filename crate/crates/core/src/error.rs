//! Error types shared across the sampling and imputation modules.

use thiserror::Error;

/// Errors raised by samplers, data handling, and imputation.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index} below tolerance)")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("Cholesky pivot underflow while factoring a normal-gamma scale matrix (index {index})")]
    SingularCholesky { index: usize },
    #[error("normal-gamma degrees of freedom must be positive, got {df}")]
    NonpositiveDf { df: f64 },
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| exceeds tolerance")]
    NotSymmetric { i: usize, j: usize },
    #[error("truncation interval is empty at coordinate {index}: lower {lower} >= upper {upper}")]
    EmptyBox { index: usize, lower: f64, upper: f64 },
    #[error("empty truncation interval: lower {lower} >= upper {upper}")]
    EmptyInterval { lower: f64, upper: f64 },
    #[error("warm-start point violates the truncation box at coordinate {index}")]
    InfeasibleStart { index: usize },
    #[error("lagged outcome for subject {subject} visit {visit} is unavailable")]
    MissingHistory { subject: usize, visit: usize },
    #[error("posterior for visit {visit} is improper: {reason}")]
    ImproperPosterior { visit: usize, reason: String },
    #[error("arm label `{0}` does not appear in the dataset")]
    UnknownArm(String),
    #[error("log acceptance function is not finite ({0})")]
    NonfiniteLogPhi(f64),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn improper(visit: usize, reason: impl Into<String>) -> Self {
        Error::ImproperPosterior {
            visit,
            reason: reason.into(),
        }
    }
}
