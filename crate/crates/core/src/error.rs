use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RostError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("enumeration guard: {0}")]
    Guard(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),
    #[error("moment catalogs differ")]
    CatalogMismatch,
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, RostError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(RostError::InvalidParameter(msg.into()))
}
