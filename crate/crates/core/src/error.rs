use thiserror::Error;

/// Errors raised anywhere in the laboratory.
///
/// The variants map onto the CLI exit codes: configuration problems exit 2,
/// dataset/input problems exit 3, incompatible inputs exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
