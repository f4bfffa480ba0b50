use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape4, len: usize },

    #[error("{op}: shape mismatch {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape4,
        rhs: Shape4,
    },

    #[error("{op}: expected {expected} input channels, found {found}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("channel range {start}..{} out of bounds for {channels} channels", start + len)]
    ChannelRange {
        start: usize,
        len: usize,
        channels: usize,
    },

    #[error("{op}: output would have zero spatial size")]
    EmptyOutput { op: &'static str },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("expected a scalar tensor, got shape {0}")]
    NotScalar(Shape4),

    #[error("tape has already been differentiated")]
    TapeConsumed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error(transparent)]
    Spec(#[from] SpecError),

    #[error("architecture: {0}")]
    Arch(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Parse error in a key-value document, with a 1-based position.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}, column {column}: {message}")]
pub struct SpecError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl SpecError {
    pub fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        SpecError {
            line,
            column,
            message: message.into(),
        }
    }
}
