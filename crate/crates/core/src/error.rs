use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: cannot build a vocabulary")]
    EmptyCorpus,

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("unknown task kind `{0}`")]
    UnknownTask(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("episode already terminated")]
    EpisodeDone,

    #[error("episode has not terminated")]
    EpisodeNotDone,

    #[error("window of length {len} exceeds context length {context}")]
    WindowTooLong { len: usize, context: usize },

    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),

    #[error("every token is masked")]
    AllMasked,

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error("invalid metric input: {0}")]
    Metric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("labeled data has a single class; reseed or raise the fraction")]
    SingleClass,

    #[error("stale rollout: collected under policy version {rollout}, model is at {model}")]
    StaleRollout { rollout: u64, model: u64 },

    #[error("rollout is empty")]
    EmptyRollout,

    #[error("refusing to overwrite existing output {0} (pass --overwrite)")]
    WouldClobber(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
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

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
