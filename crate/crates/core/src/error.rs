use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument value.
    #[error("config error: {0}")]
    Config(String),

    /// A required artifact (checkpoint, pseudo-label file, scene file) is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Point projected behind the camera plane.
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    /// Array or list shape does not match the contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingArtifact(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
