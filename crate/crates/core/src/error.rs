use thiserror::Error;

use crate::layers::LayerParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("parameter kind mismatch: params are {params}, threat spec is {spec}")]
    KindMismatch {
        params: &'static str,
        spec: &'static str,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("pixel ({row}, {col}) is outside the interior domain")]
    OutOfDomain { row: usize, col: usize },

    #[error("no theorem witness: {0}")]
    NoWitness(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("attack diverged at iteration {iteration}: non-finite loss")]
    AttackDiverged {
        iteration: usize,
        last_finite: Vec<LayerParams>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
