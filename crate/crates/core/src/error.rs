use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate signal: every sample is zero")]
    DegenerateSignal,

    #[error("degenerate embedding: zero-norm vector")]
    DegenerateEmbedding,

    #[error("duplicate device id {0}")]
    DuplicateDevice(usize),

    #[error("score set needs at least one genuine and one impostor pair")]
    EmptyScores,

    #[error("all embeddings share one label; no impostor pairs")]
    MissingImpostors,

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

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

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures caused by the user's input rather than by the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::DuplicateDevice(_))
    }
}
