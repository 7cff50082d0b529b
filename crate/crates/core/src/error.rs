use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's arguments was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Batch statistics are undefined: a train-mode normalization saw a
    /// single element per channel.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A non-finite loss appeared; the epoch is the one being trained when
    /// it happened.
    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    /// Malformed image file (bad magic, maxval, or truncated payload).
    #[error("codec error in {path}: {detail}")]
    Codec { path: String, detail: String },

    /// Malformed dataset manifest; `line` is the 1-based line in the file.
    #[error("manifest error at {path}:{line}: {detail}")]
    Manifest {
        path: String,
        line: usize,
        detail: String,
    },

    /// Checkpoint file rejected (bad magic, shape mismatch, missing tensor).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
