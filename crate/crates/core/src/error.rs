use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller handed us something outside the documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An internal invariant failed; indicates a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Training diverged (NaN or runaway loss for 10 consecutive batches).
    #[error("training diverged at batch {batch}: {detail}")]
    Diverged { batch: usize, detail: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 invalid input, 3 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Format { .. } => 2,
            Error::Diverged { .. } => 3,
            _ => 1,
        }
    }
}
