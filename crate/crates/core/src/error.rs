use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value is outside the domain of the operation (e.g. `gamma <= 0`).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    #[error("attention mask has no valid entries")]
    Mask,

    #[error("image too small: {0}")]
    Size(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line tool: 2 for data/format
    /// problems, 3 for numerical failures, 1 for everything caused by bad
    /// arguments.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::DegenerateData(_) => 3,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Shape(_) => 2,
            Error::Domain(_)
            | Error::Index { .. }
            | Error::Mask
            | Error::Size(_)
            | Error::Config(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
