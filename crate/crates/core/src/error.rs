//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box is empty after clipping to {width}x{height}")]
    EmptyAfterClip { width: f64, height: f64 },

    #[error("image {width}x{height} is too small to produce a feature grid (need >= {min} px per side)")]
    ImageTooSmall { width: u32, height: u32, min: u32 },

    #[error("region {x1:.1},{y1:.1} {w:.1}x{h:.1} is too small to featurize at any pyramid level")]
    RegionTooSmall { x1: f64, y1: f64, w: f64, h: f64 },

    #[error("{what}: needed {needed}, found {found}")]
    InsufficientData {
        what: String,
        needed: usize,
        found: usize,
    },

    #[error("negative-patch covariance is degenerate (not positive definite after regularization)")]
    DegenerateNegatives,

    #[error("training set is degenerate: {0}")]
    DegenerateTrainingSet(String),

    #[error("too few regression pairs: needed {needed}, found {found}")]
    InsufficientPairs { needed: usize, found: usize },

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract mismatch: {0}")]
    ContractMismatch(String),

    #[error("malformed {kind} file {path}: {msg}")]
    MalformedFile {
        kind: &'static str,
        path: String,
        msg: String,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unknown image id {0:?}")]
    UnknownImageId(String),

    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    #[error("no ground truth loaded")]
    NoGroundTruth,

    #[error("no proposals listed for image {0:?}")]
    MissingProposals(String),

    #[error("missing element average images under {0} (run visualize-elements first)")]
    MissingAverages(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn insufficient(what: impl Into<String>, needed: usize, found: usize) -> Self {
        Error::InsufficientData {
            what: what.into(),
            needed,
            found,
        }
    }

    pub(crate) fn malformed(kind: &'static str, path: &std::path::Path, msg: impl Into<String>) -> Self {
        Error::MalformedFile {
            kind,
            path: path.display().to_string(),
            msg: msg.into(),
        }
    }
}
