use thiserror::Error;

/// Errors raised by estimation, inference and data handling.
#[derive(Debug, Error)]
pub enum ConquerError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate design: column {column} has zero variance")]
    DegenerateDesign { column: usize },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical divergence at iteration {iteration}: non-finite loss or gradient")]
    NumericalDivergence { iteration: usize },

    #[error("singular Hessian (condition estimate {condition:.3e}); try a larger bandwidth h")]
    SingularHessian { condition: f64 },

    #[error("Hessian is not positive definite after jitter escalation; try a larger bandwidth b")]
    NonPositiveDefiniteHessian,

    #[error("unreliable inference: only {usable} usable bootstrap draws (need at least {required})")]
    UnreliableInference { usable: usize, required: usize },

    #[error("oracle budget exceeded: {needed} subsets > {budget}")]
    BudgetExceeded { needed: u128, budget: u64 },

    #[error("every enumerated basis is singular")]
    AllSubsetsSingular,

    #[error("quadrature did not reach tolerance {tol:e} (estimated error {estimate:e})")]
    Quadrature { tol: f64, estimate: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConquerError>;

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(ConquerError::Domain(format!(
            "quantile level tau must lie in (0, 1), got {tau}"
        )))
    }
}

pub(crate) fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(ConquerError::Domain(format!(
            "bandwidth must be positive and finite, got {h}"
        )))
    }
}
