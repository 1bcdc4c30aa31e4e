use semvoc_grad::{CheckpointError, GradError};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("signal: {0}")]
    Signal(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error("provider mismatch: {0}")]
    Provider(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Signal(_) => "signal",
            Error::Wav(_) => "wav",
            Error::Provider(_) => "provider",
            Error::Numeric(_) | Error::Grad(_) => "numeric",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => Error::Io(io),
            other => Error::Wav(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}
