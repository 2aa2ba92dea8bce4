use std::path::PathBuf;

/// Error type shared by all modules of the crate.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// Invalid configuration value; the message names the offending key.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shape disagreement between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// File-format or version problem on load.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training or sampling produced non-finite values.
    #[error("numerical divergence: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CoreError::Format { path: path.into(), reason: reason.into() }
    }
}
