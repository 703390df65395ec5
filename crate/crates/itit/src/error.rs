use thiserror::Error;

/// Crate-wide error type for data, config and file-format failures.
///
/// Shape violations inside the tensor engine and model forward passes are
/// programming errors and panic with a message naming the operation and the
/// offending shapes instead of returning `Err`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("format error in {file}: {msg}")]
    Format { file: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
