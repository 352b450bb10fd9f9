use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("tape integrity: {0}")]
    Tape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
