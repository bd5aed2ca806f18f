//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApexError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error in {record}: {reason}")]
    Format { record: String, reason: String },
    #[error("key error: {0}")]
    Key(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ApexError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::ApexError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
