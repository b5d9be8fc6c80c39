use std::path::PathBuf;

use thiserror::Error;

/// Failures reading a compressed stream.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("stream ended early")]
    Truncated,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("stream was written for model scale id {found}, loaded model is {expected}")]
    ScaleMismatch { expected: u8, found: u8 },
    #[error("invalid dimensions {0}x{1}")]
    BadDimensions(u32, u32),
    #[error("{0} trailing bytes after the last stream")]
    TrailingBytes(usize),
    #[error("corrupt stream: {0}")]
    Corrupt(&'static str),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("bitstream: {0}")]
    Bitstream(#[from] BitstreamError),
    #[error("data: {0}")]
    Data(String),
    #[error("shape: {0}")]
    Shape(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } => 3,
            Error::Checkpoint(_) => 4,
            Error::Bitstream(_) => 5,
            Error::Data(_) | Error::Shape(_) => 6,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
