//! Crate-wide error type.

/// Errors produced by dataset generation, model code, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error (line {line}): {msg}")]
    Config { line: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("archive error in {path}: {msg}")]
    Archive { path: String, msg: String },

    #[error("checksum mismatch for {file}")]
    ChecksumMismatch { file: String },

    #[error("non-finite loss at iteration {iter} of phase {phase}")]
    Divergence { phase: String, iter: usize },

    #[error("frozen parameters were modified: {0}")]
    FrozenViolation(String),

    #[error("{0}")]
    Strategy(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
