use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty stream")]
    EmptyStream,

    #[error("event {index} at ({x}, {y}) lies outside the {width}x{height} sensor")]
    EventOutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },

    #[error("bin count must be even and >= 2, got {0}")]
    InvalidBins(usize),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated record: {what} needs {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("unsorted timestamps at record {index}: {previous} > {current}")]
    UnsortedTimestamps {
        index: usize,
        previous: u64,
        current: u64,
    },

    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("no events generated")]
    NoEvents,

    #[error("invalid scene parameters: {0}")]
    InvalidScene(String),

    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("spatial size {height}x{width} is not a multiple of {multiple}")]
    SpatialSize {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("non-finite input current in layer {layer}")]
    NonFiniteCurrent { layer: usize },

    #[error("incomplete trace: {have} of {need} timesteps recorded")]
    IncompleteTrace { have: usize, need: usize },

    #[error("no supervised pixels")]
    NoSupervisedPixels,

    #[error("empty evaluation mask")]
    EmptyMask,

    #[error("activity undefined for analog networks")]
    ActivityUndefined,

    #[error("crop {crop_h}x{crop_w} larger than input {height}x{width}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        height: usize,
        width: usize,
    },

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: usize, diagnostics: String },

    #[error("model/data mismatch: {0}")]
    Mismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFiniteLoss { .. } | Error::NonFiniteCurrent { .. } => 4,
            _ => 3,
        }
    }
}
