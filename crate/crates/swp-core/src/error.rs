use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Contract violations (indexing a tensor
/// out of bounds, mismatched internal buffers) panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("operation requires sparsity mode {expected}, model is in {actual}")]
    Mode { expected: String, actual: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed model file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("checksum mismatch in layer {layer}")]
    Integrity { layer: usize },

    #[error("dataset format error in {path}: {reason}")]
    DataFormat { path: PathBuf, reason: String },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Error {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
