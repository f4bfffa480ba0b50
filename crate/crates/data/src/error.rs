use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode PNG: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("{path}: cannot encode PNG: {reason}")]
    Encode { path: PathBuf, reason: String },

    #[error("sample {id}: missing {missing}")]
    MissingPair { id: String, missing: PathBuf },

    #[error("palette line {line}: {reason}")]
    Palette { line: usize, reason: String },

    #[error("infeasible synthetic dataset: {0}")]
    Infeasible(String),

    #[error("{0}")]
    Shape(String),

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] ddnet_core::Error),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
        let path = path.into();
        move |source| DataError::Io { path, source }
    }
}
