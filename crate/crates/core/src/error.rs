use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("unsupported version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u8,
        expected: u8,
    },

    #[error("truncated file {path}: {msg}")]
    Truncated { path: PathBuf, msg: String },

    #[error("unknown parameter array `{0}`")]
    UnknownArray(String),

    #[error("missing sidecar metadata {0}")]
    MissingSidecar(PathBuf),

    #[error("no signal detected")]
    NoSignal,

    #[error("capture yielded no usable seconds")]
    NoUsableSeconds,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad numerical or domain inputs rather than
    /// unreadable or malformed files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Shape(_)
                | Error::NoSignal
                | Error::NoUsableSeconds
                | Error::EmptyDataset
        )
    }
}
