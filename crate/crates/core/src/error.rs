use std::path::PathBuf;

use tensorkit::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error in {}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Data { path: path.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data { .. } | Error::Io { .. } | Error::Dimension(_) => 2,
            Error::Numeric(_) => 3,
            Error::Tensor(TensorError::Numeric(_)) => 3,
            Error::Tensor(TensorError::Argument(_)) => 1,
            Error::Tensor(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
