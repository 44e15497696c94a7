use std::path::PathBuf;

use crate::image::Domain;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("expected a {expected:?} image, got {found:?}")]
    Domain { expected: Domain, found: Domain },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("value {value} outside of range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at round {round}, step {step}: {detail}")]
    Divergence {
        round: usize,
        step: usize,
        detail: String,
    },

    #[error("warmup did not reach accuracy threshold {threshold} (best {best})")]
    WarmupFailed { threshold: f64, best: f64 },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
