use std::io;

use thiserror::Error;

/// Errors surfaced by the engine.
///
/// Validation problems (bad shapes, bad configs, malformed input files) are
/// kept apart from I/O failures so that front ends can map them to
/// different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("events out of order at index {index}: t={t} after t={prev}")]
    UnorderedEvents { index: usize, prev: u64, t: u64 },

    #[error("no evaluable pixels (valid and event masks are disjoint or empty)")]
    NoEvaluablePixels,

    #[error("format error at byte {offset}: {kind}")]
    Format { offset: u64, kind: FormatError },

    #[error("checkpoint error: {0}")]
    Checkpoint(CheckpointError),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("image error: {0}")]
    Image(String),
}

/// Structural problems in one of the binary containers.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated input")]
    Truncated,
    #[error("timestamp regression ({t} < {prev})")]
    TimestampRegression { prev: u64, t: u64 },
    #[error("coordinate ({x}, {y}) outside {width}x{height} sensor")]
    CoordinateOutOfRange { x: u32, y: u32, width: u32, height: u32 },
    #[error("invalid polarity {0}")]
    BadPolarity(i8),
    #[error("invalid dimensions {width}x{height}")]
    BadDimensions { width: i64, height: i64 },
    #[error("non-finite flow value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file")]
    Truncated,
    #[error("tensor count mismatch: file has {found}, model expects {expected}")]
    TensorCount { found: usize, expected: usize },
    #[error("unknown or mismatched tensor '{0}'")]
    TensorMismatch(String),
    #[error("malformed config block: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Image(_))
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::Checkpoint(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
