use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The coefficient is not positive at some (vertex, collocation node) pair.
    #[error("coefficient not positive at vertex {vertex}, node {node}: {value}")]
    CoercivityViolation { vertex: usize, node: usize, value: f64 },

    #[error("degenerate mode {mode}: zero variance")]
    DegenerateMode { mode: usize },

    #[error("iteration limit reached after {iterations} iterations (relative residual {residual:e})")]
    IterationLimit { iterations: usize, residual: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
