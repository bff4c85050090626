use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Excess returns are not in the range of the volatility matrix.
    #[error("no market price of risk at t={t}: least-squares residual {residual:e}")]
    NoRiskPrice { t: f64, residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no convergence after {iterations} iterations: {what}")]
    Convergence { what: String, iterations: usize },

    #[error("operation not supported for the {0} preference family")]
    UnsupportedFamily(&'static str),

    /// Initial wealth at or below the present value of the income floor.
    #[error("wealth {x} is not above the floor {floor}")]
    FloorRegion { x: f64, floor: f64 },

    #[error("volatility covariance is singular (condition number {condition:e})")]
    SingularCovariance { condition: f64 },

    #[error("preference structure is not homogeneous (relative deviation {deviation:e})")]
    NotHomogeneous { deviation: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
