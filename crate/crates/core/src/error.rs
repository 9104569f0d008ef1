use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("age grids differ: {0}")]
    GridMismatch(String),

    #[error("age truncation does not control the tail: a_max = {a_max} <= sigma = {sigma}")]
    TailNotControlled { a_max: f64, sigma: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("history does not cover the requested time: {0}")]
    HistoryGap(String),

    #[error("insufficient data for fit: {usable} usable points, at least {required} needed")]
    InsufficientData { usable: usize, required: usize },

    #[error("degenerate constants: {0}")]
    DegenerateConstants(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    /// Numerical failures (as opposed to invalid input).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonConvergence { .. } | Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::InvalidParameter(format!("{name} must be finite, got {value}")))
    }
}
