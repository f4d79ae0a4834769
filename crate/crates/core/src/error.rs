use std::io;

/// Errors raised across the enhancement engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported sample rate {rate} Hz (expected {expected} Hz)")]
    UnsupportedRate { rate: u32, expected: u32 },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
