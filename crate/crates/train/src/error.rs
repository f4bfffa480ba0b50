use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] ddnet_core::Error),

    #[error(transparent)]
    Data(#[from] ddnet_data::DataError),

    #[error("config line {line}, column {column}: {message}")]
    Config { line: usize, column: usize, message: String },

    #[error("invalid training setup: {0}")]
    Invalid(String),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    State { path: PathBuf, reason: String },
}

impl From<ddnet_core::SpecError> for TrainError {
    fn from(e: ddnet_core::SpecError) -> Self {
        TrainError::Config {
            line: e.line,
            column: e.column,
            message: e.message,
        }
    }
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TrainError {
        let path = path.into();
        move |source| TrainError::Io { path, source }
    }
}
