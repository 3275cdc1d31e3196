use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unknown track id {0}")]
    UnknownTrack(u32),

    #[error("unknown frame {0}")]
    UnknownFrame(usize),

    #[error("checkpoint and manifest do not match: {0}")]
    Mismatch(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Stable, machine-parseable category used by the CLI exit line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid-input",
            Error::Shape(_) => "shape",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::UnknownTrack(_) => "unknown-track",
            Error::UnknownFrame(_) => "unknown-frame",
            Error::Mismatch(_) => "mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::Config(_) => "config",
        }
    }
}
