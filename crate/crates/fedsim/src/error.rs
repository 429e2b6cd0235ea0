use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid scheme or model parameters.
    #[error("invalid parameter: {0}")]
    Params(String),

    /// A value fell outside its declared range.
    #[error("value out of range: {0}")]
    Range(String),

    /// Malformed input file; `row` is 1-based and counts the header.
    #[error("parse error in {path} at row {row}, column {col}: {msg}")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        msg: String,
    },

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable one-word class used by the CLI for machine-parseable failures.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "nonfinite",
            Error::Params(_) => "params",
            Error::Range(_) => "range",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
