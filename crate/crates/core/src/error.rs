use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CarveError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge (last estimate {estimate}, gap {gap})")]
    Convergence { estimate: f64, gap: f64 },

    #[error("solver did not converge after {iterations} iterations (last change {change})")]
    SolverConvergence { iterations: usize, change: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("selection probability underflows (log-probability {log_prob})")]
    RareEventUnderflow { log_prob: f64 },

    #[error("interval inversion failed: {0}")]
    Inversion(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    InvariantFailure(String),
}

pub type Result<T> = std::result::Result<T, CarveError>;

pub(crate) fn ensure_finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(CarveError::Domain(format!(
            "{what} must be finite, got {x}"
        )))
    }
}
