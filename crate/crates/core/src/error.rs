use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model/loss/training configuration or mismatched parameter shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied data that violates an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// NaN/Inf encountered where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("malformed input at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Bitstream or checkpoint container does not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("model mismatch: bitstream was produced by model {expected:016x}, bundle is {found:016x}")]
    ModelMismatch { expected: u64, found: u64 },

    #[error("entropy encode error: {0}")]
    Encode(String),

    #[error("entropy decode error: {0}")]
    Decode(String),

    #[error("cdf freeze error: {0}")]
    Freeze(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
