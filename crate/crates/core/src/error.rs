use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wrong magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: needed {needed} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in section {section}")]
    Checksum { section: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
