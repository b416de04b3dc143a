use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("non-finite loss at step {step}{}", checkpoint.as_ref().map(|p| format!(" (diagnostic checkpoint: {})", p.display())).unwrap_or_default())]
    NonFinite {
        step: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Attach a file path to an error raised while reading or writing it.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 1,
            Error::NonFinite { .. } | Error::Shape { .. } => 3,
            _ => 2,
        }
    }

    /// The innermost error, skipping file-context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            other => other,
        }
    }
}
