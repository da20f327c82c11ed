use thiserror::Error;

/// Errors raised while evaluating theta series, locating divisor points
/// or assembling operators.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid period matrix: {0}")]
    InvalidOmega(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("theta series did not converge: required radius {radius:.3} exceeds cap {cap:.3}")]
    NonConvergent { radius: f64, cap: f64 },
    #[error("point lies on the theta divisor: |theta| = {value:.3e} below floor {floor:.3e}")]
    OnDivisor { value: f64, floor: f64 },
    #[error("root finding did not converge after {starts} starts")]
    NoConvergence { starts: usize },
    #[error("expected {expected} intersection classes, found {found}")]
    WrongCount { expected: usize, found: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("ill-conditioned system (condition number {cond:.3e}): {what}")]
    IllConditioned { what: String, cond: f64 },
    #[error("fit residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    BadFit { residual: f64, tol: f64 },
    #[error("a denominator vanishes near the x-polydisc: {0}")]
    DivisorHit(String),
    #[error("operator order {order} exceeds cap {cap}")]
    OrderCap { order: usize, cap: usize },
    #[error("function family does not supply derivative ({0}, {1})")]
    MissingDerivative(u8, u8),
    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    /// True for failures that a fresh draw of the shift parameters may cure.
    pub fn is_genericity_failure(&self) -> bool {
        matches!(
            self,
            Error::WrongCount { .. }
                | Error::Degenerate(_)
                | Error::IllConditioned { .. }
                | Error::DivisorHit(_)
                | Error::OnDivisor { .. }
        )
    }

    /// True for failures of a numerical procedure to converge.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            Error::InvalidOmega(_) | Error::InvalidInput(_) | Error::Serialization(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
