use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),

    #[error("triangulation is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training aborted at step {step}: non-finite {term}")]
    Diverged { step: usize, term: String },

    #[error("parse error in {what} at line {line}: {message}")]
    Parse {
        what: String,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("image codec: {0}")]
    Codec(String),

    #[error("json: {0}")]
    Json(String),
}

// Converted to text so `{:#}` chains do not repeat the cause.
impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Codec(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    pub(crate) fn parse(what: &str, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            what: what.to_string(),
            line,
            message: message.into(),
        }
    }
}
