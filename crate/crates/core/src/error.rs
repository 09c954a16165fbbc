use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LinkError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LinkError {
    /// Two operands whose shapes cannot be combined.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed binary or text input. `offset` is the byte (or line) position
    /// where decoding stopped.
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LinkError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LinkError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        LinkError::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LinkError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LinkError::Usage(_) | LinkError::Config(_) | LinkError::Dimension { .. } => 1,
            LinkError::Format { .. } | LinkError::Io { .. } => 2,
            LinkError::Numeric(_) | LinkError::Training { .. } => 3,
        }
    }
}
