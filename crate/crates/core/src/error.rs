use thiserror::Error;

use crate::skeleton::ValidationReport;

#[derive(Debug, Error)]
pub enum RigError {
    #[error("validation failed: {0:?}")]
    Invalid(ValidationReport),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}
