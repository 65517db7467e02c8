use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} is non-finite{}", .context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        what: String,
        context: Option<String>,
    },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {cause}")]
    Stage { stage: String, cause: Box<Error> },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors that a run could have caught before doing any compute.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::Shape { .. } => true,
            _ => false,
        }
    }
}
