use std::path::PathBuf;

/// Errors produced anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for size {len}")]
    Index { index: usize, len: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("empty data: {0}")]
    EmptyData(String),
    #[error("requested {requested} sentences but the corpus only has {available}")]
    Size { requested: usize, available: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("distance undefined: {0}")]
    UndefinedDistance(String),
    #[error("insufficient history: need at least {needed} ok trials, have {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error("tuner error: {0}")]
    Tuner(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
