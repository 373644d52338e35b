//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values or a missing prerequisite artifact.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Empty or inconsistent data.
    #[error("data error: {0}")]
    Data(String),

    /// Fewer segments than the train/val/test rule needs.
    #[error("split error: recording has {0} segments, at least 5 are required")]
    Split(usize),

    #[error("index error: {0}")]
    Index(String),

    /// Argument outside the domain of a closed-form expression.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite loss or gradient.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A statistical test that is undefined for the given samples.
    #[error("undefined test: {0}")]
    UndefinedTest(String),

    /// Malformed binary or JSON artifact.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
