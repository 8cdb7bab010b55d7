//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operation received incompatible shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Operand outside the mathematical domain of an operation
    /// (log of a non-positive value, division by zero, zero-norm cosine input).
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// Structurally valid input that the pipeline cannot do anything with
    /// (all-masked stream, singleton contrastive batch, empty eval set).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Invalid configuration (head count not dividing width, layer index
    /// out of range, inconsistent dimensions).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid data (token id out of range, label outside [-3, 3],
    /// feature width not matching the dataset header).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse (backward on a non-scalar, backward called twice).
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical failure at runtime (non-finite loss).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed dataset line.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
