use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants are grouped by what went wrong rather than where; [`Error::category`]
/// folds them into the coarse classes the CLI and the C ABI expose.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("surgery error: {0}")]
    Surgery(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, stable across the CLI exit codes and the C ABI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Malformed files, bad pixel data, inconsistent inputs, I/O failures.
    Data,
    /// Invalid model, configuration, shapes or surgery resolution.
    Model,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Format(_)
            | Error::Truncated(_)
            | Error::Unsupported(_)
            | Error::Consistency(_)
            | Error::Data(_)
            | Error::Io { .. } => Category::Data,
            Error::Dimension(_)
            | Error::Shape(_)
            | Error::MissingWeight(_)
            | Error::Config(_)
            | Error::Domain(_)
            | Error::Surgery(_) => Category::Model,
        }
    }
}
