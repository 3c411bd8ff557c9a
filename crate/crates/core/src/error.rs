use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank-deficient system, supply ridge")]
    RankDeficient,

    #[error("semantic is constant over samples")]
    ConstantSemantic,

    #[error("column {index} has zero norm")]
    ZeroNormColumn { index: usize },

    #[error("column {index} of the latent representation is not unit norm (norm {norm})")]
    NonUnitColumn { index: usize, norm: f64 },

    #[error("objective became non-finite at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("unknown semantic '{0}'")]
    UnknownSemantic(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
