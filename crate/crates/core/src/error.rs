use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("simulation failed on path {path}, step {step}: {reason}")]
    Simulation { path: usize, step: usize, reason: String },

    #[error("non-finite {what} on path {path}")]
    NonFinite { what: &'static str, path: usize },

    #[error("conditional expectation estimator failed: {0}")]
    Estimator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
