use thiserror::Error;

/// Errors raised across the synthesis toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{argument}`: expected {expected}, got {found}")]
    DimensionMismatch {
        argument: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("factorization of {what} failed (matrix not positive definite); {advice}")]
    Factorization { what: String, advice: String },

    #[error("LMI problem is unbounded: {0}")]
    Unbounded(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(argument: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            argument,
            expected,
            found,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
