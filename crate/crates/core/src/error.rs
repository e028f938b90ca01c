use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification used by callers (the CLI maps these to exit codes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// The caller asked for something that cannot be done (empty input, unknown id, bad flag).
    Usage,
    /// Shapes, ranks, dimensions or on-disk data do not line up.
    Structural,
    /// A computation produced a non-finite value.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step} (lr = {lr}): loss = {loss}")]
    Training { step: usize, lr: f64, loss: f64 },

    #[error("unsupported library format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("blob `{blob}` is truncated: expected {expected} bytes, found {found}")]
    Truncated {
        blob: String,
        expected: usize,
        found: usize,
    },

    #[error("blob `{blob}` failed its checksum: expected {expected:08x}, computed {found:08x}")]
    Checksum {
        blob: String,
        expected: u32,
        found: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Usage(_) => ErrorKind::Usage,
            Error::Numeric(_) | Error::Training { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Structural,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
