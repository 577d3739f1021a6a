use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Autodiff(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown node ({var_type}, {location})")]
    UnknownNode { var_type: String, location: String },

    #[error("unknown variable type `{0}`")]
    UnknownType(String),

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("empty time range [{0}, {1})")]
    EmptyRange(i64, i64),

    #[error("{0}")]
    Sampling(String),

    #[error("forecast length {fs} exceeds the decoder capacity {max_fs}")]
    ForecastTooLong { fs: usize, max_fs: usize },

    #[error("no scorable target in batch")]
    NoScorableTarget,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("every seed failed; first error: {0}")]
    SeedsFailed(String),

    #[error("no target node matching the filter appears in the dataset")]
    NoTarget,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
