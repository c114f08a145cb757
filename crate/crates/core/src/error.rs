use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the dehazing toolkit.
#[derive(Debug, Error)]
pub enum DehazeError {
    /// A caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two arrays that must agree in extent do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A computation produced NaN or an infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An object was used in a state that does not support the request.
    #[error("invalid state: {0}")]
    State(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed png {}: {reason}", path.display())]
    MalformedPng { path: PathBuf, reason: String },

    #[error("unsupported pixel layout in {}: {reason}", path.display())]
    ChannelLayout { path: PathBuf, reason: String },

    #[error("corrupt manifest {}: {reason}", path.display())]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("blob does not match tensor index: {0}")]
    BlobMismatch(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("network kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DehazeError>;

impl DehazeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DehazeError::InvalidInput(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        DehazeError::DimensionMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            DehazeError::NotFound(path)
        } else {
            DehazeError::Io { path, source }
        }
    }
}
