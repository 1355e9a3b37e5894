use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LoocError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LoocError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset format error (scene {scene_id}): {msg}")]
    Format { scene_id: String, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss {loss} in batch [{}]", batch_ids.join(", "))]
    NonFiniteLoss { loss: f64, batch_ids: Vec<String> },
    #[error("degenerate proposals: no pseudo-label produced for any image in round {round}")]
    DegenerateProposals { round: usize },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl LoocError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LoocError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        LoocError::Json {
            path: path.into(),
            source,
        }
    }
}
