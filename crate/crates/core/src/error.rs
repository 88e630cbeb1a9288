use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cells {from} and {to} are not 8-neighbours")]
    NonAdjacentCells { from: usize, to: usize },

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("ignition cell {0} is unburnable")]
    IgnitionOnUnburnable(usize),

    #[error("ignition cell {0} lies outside the grid")]
    IgnitionOutOfBounds(usize),

    #[error("ensemble size must be at least 1, got {0}")]
    InvalidEnsembleSize(usize),

    #[error("terrain has no burnable cells")]
    NoBurnableCells,

    #[error("invalid terrain: {0}")]
    InvalidTerrain(String),

    #[error("invalid schedule bounds: {0}")]
    InvalidScheduleBounds(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("value {value} at index {index} outside [0, 1]")]
    RangeViolation { index: usize, value: f32 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("no target pixel is positive")]
    NoValidPixels,

    #[error("frame {h}x{w} is smaller than the {window}x{window} window")]
    FrameTooSmall { h: usize, w: usize, window: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
