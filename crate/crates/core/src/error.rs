use std::io;

/// Errors raised anywhere in the prediction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible shapes or sizes.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller violated an API precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Batch normalization was run in eval mode before any training update.
    #[error("statistics unset: {0}")]
    StatisticsUnset(String),
    /// Malformed `.flo` or checkpoint file.
    #[error("format error: {0}")]
    Format(String),
    /// Unusable input data (images, labels, directories).
    #[error("data error: {0}")]
    Data(String),
    /// Invalid or infeasible configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
