use thiserror::Error;

/// Errors raised by the simulators and their helpers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported velocity law: {0}")]
    UnsupportedLaw(String),

    #[error("state left the constant-intensity region (|A||Q|+|V| = {level:.6}, limit {limit:.6})")]
    OutsideRegion { level: f64, limit: f64 },

    #[error("numerical blowup: {0}")]
    Blowup(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("quadrature did not converge: estimate {estimate}, error {error}")]
    Quadrature { estimate: f64, error: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
