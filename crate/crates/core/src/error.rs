use std::path::PathBuf;

use thiserror::Error;

use crate::transforms::ScaleSet;

#[derive(Debug, Error)]
pub enum WinoError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("compute error: {0}")]
    Compute(String),

    #[error("singular transform: {0}")]
    SingularTransform(String),

    #[error("invalid scale: {0}")]
    InvalidScale(String),

    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("tuning diverged at step {step}")]
    TuneDiverged {
        step: usize,
        last_good: Box<ScaleSet>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl WinoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WinoError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = WinoError> = std::result::Result<T, E>;
