use std::path::PathBuf;

use thiserror::Error;

/// Decoding failures for the on-disk tensor format.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"AZTN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unsupported dtype {0}")]
    BadDtype(u8),
    #[error("truncated header")]
    ShortHeader,
    #[error("short payload: expected {expected} bytes, found {found}")]
    ShortPayload { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("empty or zero-length dimension in header")]
    ZeroDim,
    #[error("non-finite payload value at flat index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("frame index {index} out of range 1..={frames}")]
    FrameIndex { index: usize, frames: usize },
    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("trace mismatch: {0}")]
    TraceMismatch(String),
    #[error("trace has no latent for t = {0}")]
    MissingLatent(usize),
    #[error("share_kv is enabled but no K/V source was supplied for block {0}")]
    MissingKvSource(usize),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
