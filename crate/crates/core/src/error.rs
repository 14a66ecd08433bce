use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A run configuration or fusion spec violates one of its rules.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset content is invalid (manifest records, vocabulary, captions).
    #[error("data error: {0}")]
    Data(String),

    /// A file does not follow its binary or text format.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Non-finite values or other numerical breakdowns at runtime.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Autodiff misuse, e.g. calling backward on a detached tensor.
    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl std::fmt::Display, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors a user can fix by editing configuration or inputs.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Data(_) | Error::Format { .. } | Error::Io { .. }
        )
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
