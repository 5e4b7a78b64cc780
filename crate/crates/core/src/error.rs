//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("message needs {required} bits but the tensor holds {capacity}")]
    CapacityExceeded { required: usize, capacity: usize },

    #[error("malformed message header: {0}")]
    MalformedHeader(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("cannot decode image: {0}")]
    DecodeError(String),

    #[error("image codec error: {0}")]
    CodecError(String),

    #[error("image is {h}x{w}, below the minimum side of {min}")]
    TooSmall { h: usize, w: usize, min: usize },

    #[error("invalid image data: {0}")]
    InvalidImage(String),

    #[error("dataset is empty or too small to split")]
    EmptyDataset,

    #[error("sequence of intermediate images is empty")]
    EmptySequence,

    #[error("checkpoint expects {params} bpp but the message carries {message} bpp")]
    PayloadMismatch { params: usize, message: usize },

    #[error("checkpoint format version {found} is not the supported {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training loss became non-finite at step {step}")]
    DivergenceDetected { step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
