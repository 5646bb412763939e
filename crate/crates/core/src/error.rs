use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error(
        "insufficient frames: video {source_id} has {frame_count} frames, {requested} requested"
    )]
    InsufficientFrames {
        source_id: String,
        frame_count: usize,
        requested: usize,
    },

    #[error("decode failure for {source_id}: {reason}")]
    Decode { source_id: String, reason: String },

    #[error(
        "plan/source mismatch: index {index} out of range for {frame_count} frames in {source_id}"
    )]
    PlanMismatch {
        source_id: String,
        index: usize,
        frame_count: usize,
    },

    #[error("vocabulary overflow: id {id} >= vocabulary size {size}")]
    VocabularyOverflow { id: usize, size: usize },

    #[error("vocabulary file: {0}")]
    Vocabulary(String),

    #[error("empty token set: {0}")]
    EmptyTokenSet(String),

    #[error("cannot form negatives from a batch of {0}")]
    CannotFormNegatives(usize),

    #[error("generation overflow: prefix length {len} exceeds maximum {max}")]
    GenerationOverflow { len: usize, max: usize },

    #[error("no supervised positions")]
    NoSupervisedPositions,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum failure: {0}")]
    Checksum(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest {path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
