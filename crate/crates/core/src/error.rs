use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed PGM: {reason}")]
    Pgm { path: PathBuf, reason: String },

    #[error("{path}: PNG encoding failed: {reason}")]
    Png { path: PathBuf, reason: String },

    #[error("{path}: malformed metadata: {reason}")]
    Metadata { path: PathBuf, reason: String },

    #[error("missing metadata file {0}")]
    MissingMetadata(PathBuf),

    #[error("burst too short: found {found} frame(s) in {dir}, need at least 2")]
    BurstTooShort { dir: PathBuf, found: usize },

    #[error("frame size mismatch: {first} is {first_dims:?} but {second} is {second_dims:?}")]
    FrameMismatch {
        first: PathBuf,
        first_dims: (usize, usize),
        second: PathBuf,
        second_dims: (usize, usize),
    },

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("invalid burst: {0}")]
    InvalidBurst(String),

    #[error("burst image too small: {width}x{height} cannot be downsampled by {factor}")]
    ImageTooSmall { width: usize, height: usize, factor: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
