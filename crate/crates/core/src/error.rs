use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("ground-truth boxes {first} and {second} overlap with 3D IoU {iou:.4}")]
    OverlappingBoxes { first: usize, second: usize, iou: f64 },

    #[error("object center offset ({dx:.3}, {dy:.3}) exceeds search range {search_range}")]
    OutOfSearchRange { dx: f64, dy: f64, search_range: f64 },

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("grid dimensions {0:?} are not divisible by the pooling stride")]
    IndivisibleDims([usize; 3]),

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("deconvolution target coordinate set is empty")]
    EmptyTarget,

    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
