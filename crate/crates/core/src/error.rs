use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// configuration problems exit 2, I/O problems exit 3, a non-finite loss
/// aborts with 4, and undefined metrics exit 5.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown vocabulary tag: {0}")]
    Vocabulary(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at iteration {iteration} (batch ids {batch_ids:?})")]
    NonFiniteLoss {
        iteration: usize,
        batch_ids: Vec<String>,
    },

    #[error("tensor belongs to a different gradient tape")]
    TapeMismatch,

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
