use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: missing required header key `{key}`")]
    MissingKey { path: PathBuf, key: &'static str },

    #[error("{path}: payload size mismatch: expected {expected} bytes, found {actual}")]
    PayloadSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("feature schema mismatch: model expects `{expected}`, got `{actual}`")]
    SchemaMismatch { expected: String, actual: String },

    #[error("stage `{stage}` failed for series `{series}`: {source}")]
    Stage {
        stage: &'static str,
        series: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Wraps an error with the pipeline stage and series it came from.
    pub fn in_stage(self, stage: &'static str, series: &str) -> Self {
        Error::Stage {
            stage,
            series: series.to_string(),
            source: Box::new(self),
        }
    }
}
