use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("episode sampling error: {0}")]
    EpisodeSampling(String),

    #[error("{path}: {kind}")]
    Ingestion { path: PathBuf, kind: IngestionError },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, episode seed {episode_seed}")]
    Diverged { epoch: usize, episode_seed: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// What went wrong while reading a dataset directory.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestionError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated pixel payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("image is {image_w}x{image_h} but mask is {mask_w}x{mask_h}")]
    SizeMismatch {
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("class {0} is listed in both splits")]
    SplitOverlap(u32),
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("class {0} is not listed in the split manifest")]
    UnsplitClass(u32),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, kind: IngestionError) -> Self {
        Error::Ingestion {
            path: path.into(),
            kind,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
