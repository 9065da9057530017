use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("weights file: {0}")]
    Weights(String),

    #[error("no positive pixels in the training set")]
    NoPositives,

    #[error("no ground truth boxes to evaluate against")]
    NoGroundTruth,

    #[error("could not place {wanted} vehicles (placed {placed}) within the attempt budget")]
    PlacementFailure { wanted: usize, placed: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
