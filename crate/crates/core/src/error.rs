use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum GrocoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error{}: {message}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    Numeric {
        node: Option<usize>,
        message: String,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GrocoError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GrocoError::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(node: Option<usize>, msg: impl Into<String>) -> Self {
        GrocoError::Numeric {
            node,
            message: msg.into(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        GrocoError::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GrocoError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, GrocoError>;
