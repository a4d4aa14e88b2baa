use nalgebra::DVector;
use thiserror::Error;

/// Crate-wide error type.
///
/// `EscapeDetected` is not a failure of the library: it is the verdict that a
/// trajectory left its domain (or blew up) and carries the last in-domain
/// time, which completeness probes and incomplete-scenario tests rely on.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("trajectory escaped at t = {t_escape:.6}")]
    EscapeDetected {
        t_escape: f64,
        last: DVector<f64>,
    },

    #[error("point lies outside the declared domain")]
    DomainError,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("chart {chart} does not contain the requested point")]
    ChartMismatch { chart: usize },

    #[error("basis projection residual {residual:.3e} exceeds tolerance {tolerance:.1e}")]
    BasisProjectionError { residual: f64, tolerance: f64 },

    #[error("matrix logarithm: element outside the principal branch")]
    LogBranchError,

    #[error("fiber restriction excludes every point")]
    EmptyFiber,

    #[error("cocycle condition violated: worst residual {residual:.3e} at sample {index}")]
    CocycleViolation { residual: f64, index: usize },

    #[error("fibered-product constraint violated: base parts differ by {residual:.3e}")]
    FiberedProductViolation { residual: f64 },

    #[error("parse error: {0}")]
    ParseError(String),

    #[error("validation failed [{invariant}]: {detail}")]
    ValidationError { invariant: String, detail: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn validation(invariant: &str, detail: impl Into<String>) -> Self {
        Error::ValidationError {
            invariant: invariant.to_string(),
            detail: detail.into(),
        }
    }

    /// Escape time when this error is an escape verdict.
    pub fn escape_time(&self) -> Option<f64> {
        match self {
            Error::EscapeDetected { t_escape, .. } => Some(*t_escape),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
