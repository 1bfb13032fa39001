use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid threshold {0}: must lie in [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty input")]
    EmptyInput,
    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocab { id: u32, vocab_size: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("no token outside the target has positive mass")]
    DegenerateDistribution,
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("adaptor `{0}` requires a supportiveness estimator")]
    MissingSeModel(&'static str),
    #[error("invalid triple: {0}")]
    InvalidTriple(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.to_string(),
        }
    }
}
