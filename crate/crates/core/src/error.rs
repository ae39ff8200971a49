use std::path::PathBuf;

use choreo_tensor::TensorError;
use thiserror::Error;

use crate::audio::WavError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Wav(#[from] WavError),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Failure while processing one step of a multi-step run.
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
        move |e| Error::AtStep {
            step,
            source: Box::new(e),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) | Error::Tensor(TensorError::Numeric(_)) => 4,
            Error::AtStep { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
