use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite objective")]
    NonFiniteObjective,

    #[error("unknown texture kind {0}")]
    UnknownTextureKind(u8),

    #[error("unknown texture id {0}")]
    UnknownTextureId(usize),

    #[error("no content tokens")]
    NoContentTokens,

    #[error("{attribute}: best similarity {score:.3} is below threshold {threshold}")]
    LowSimilarity { attribute: String, score: f64, threshold: f64 },

    #[error("invalid attribute: {0}")]
    InvalidAttribute(String),

    #[error("invalid label map: {0}")]
    InvalidLabels(String),

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("unknown ablation {0:?}")]
    UnknownAblation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
