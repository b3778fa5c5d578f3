//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),

    #[error("matrix is not symmetric: relative asymmetry {0:.3e}")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite: min eigenvalue {min_eig:.3e} vs scale {scale:.3e}")]
    NotPsd { min_eig: f64, scale: f64 },

    #[error("vector outside the numerically retained range: relative residual {residual:.3e} (threshold {threshold:.3e})")]
    RangeViolation { residual: f64, threshold: f64 },

    #[error("invalid model or solver configuration: {0}")]
    InvalidConfig(String),

    #[error("iteration did not converge: {0}")]
    NonConvergence(String),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidConfig(msg.into())
    }
}
