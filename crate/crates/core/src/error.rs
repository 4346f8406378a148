use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the mask manufacturing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("cannot encode image: {0}")]
    Encode(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no valid pairs under {root}: {summary}")]
    NoValidPairs { root: PathBuf, summary: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(u8),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("missing predictions for: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("training diverged at epoch {epoch}, batch {batch}: ce={ce}, mmd={mmd}")]
    Diverged {
        epoch: usize,
        batch: usize,
        ce: f64,
        mmd: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
