use std::io;

use thiserror::Error;

/// Errors produced anywhere in the framework.
///
/// Variants are coarse categories; the message names the offending
/// node, record, or parameter.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("state error: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("rewrite error: {0}")]
    Rewrite(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("precondition error: {0}")]
    Precondition(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("crop error: {0}")]
    Crop(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
