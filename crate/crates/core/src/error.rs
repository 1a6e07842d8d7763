use thiserror::Error;

use crate::bcm::QpSolution;

pub type Result<T> = std::result::Result<T, BcmError>;

#[derive(Debug, Error)]
pub enum BcmError {
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite: eigenvalue {eigenvalue:e} against largest {largest:e}")]
    NotPositiveDefinite { eigenvalue: f64, largest: f64 },

    #[error("matrix is ill-conditioned: condition number {condition:e} exceeds cap {cap:e}")]
    IllConditioned { condition: f64, cap: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("simplex QP did not converge after {iterations} iterations (residual {residual:e})")]
    QpNonConvergence {
        iterations: usize,
        residual: f64,
        best: Box<QpSolution>,
    },

    #[error("kernel underflow at epsilon {epsilon}: use the log-domain solver")]
    KernelUnderflow { epsilon: f64 },

    #[error("malformed {format} data at line {line}: {message}")]
    Parse {
        format: &'static str,
        line: usize,
        message: String,
    },

    #[error("malformed IDX file: {0}")]
    Idx(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BcmError {
    pub fn is_non_convergence(&self) -> bool {
        matches!(
            self,
            BcmError::NonConvergence { .. } | BcmError::QpNonConvergence { .. }
        )
    }

    pub(crate) fn parse(format: &'static str, line: usize, message: impl Into<String>) -> Self {
        BcmError::Parse {
            format,
            line,
            message: message.into(),
        }
    }
}
