//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an operation's arguments was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or box shapes do not line up.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A prompt token is not registered in the vocabulary.
    #[error("unknown token '{0}'")]
    UnknownToken(String),

    /// A gradient contained NaN or infinity; optimizer state is untouched.
    #[error("non-finite gradient in tensor '{0}'")]
    NonFiniteGradient(String),

    /// A record in an input file could not be parsed.
    #[error("malformed input {path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },

    /// Run configuration problems: unknown keys, bad values, stage mismatch.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container problems: bad magic, version, truncation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// An I/O failure attributed to a specific file.
    #[error("{path}: {source}")]
    FileIo {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 2 for validation problems the user can
    /// fix in config or input files, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::FileIo { .. } | Error::Image(_) => 1,
            _ => 2,
        }
    }
}

/// Attach the offending path to a raw I/O result.
pub(crate) fn at_path<T>(r: std::io::Result<T>, path: &std::path::Path) -> Result<T> {
    r.map_err(|source| Error::FileIo {
        path: path.display().to_string(),
        source,
    })
}
