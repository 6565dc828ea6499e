use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("label value {value} is out of range for {num_classes} classes")]
    LabelOutOfRange { value: u8, num_classes: usize },

    #[error("mask is not one-hot at flat voxel index {index}")]
    NotOneHot { index: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("patch dims must be >= 1, got a={a}, b={b}")]
    InvalidPatchDims { a: usize, b: usize },

    #[error("patch matrix has {actual} columns but its spec requires {expected}")]
    ColumnCountMismatch { expected: usize, actual: usize },

    #[error("depth rows ({rows}) are not divisible by a*b={ab}")]
    RowCountMismatch { rows: usize, ab: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("spatial dims {dims:?} must each be divisible by {required} (2^depth)")]
    Divisibility { dims: [usize; 3], required: usize },

    #[error("epoch {epoch} is outside the schedule (total {total} epochs)")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("k-fold split needs at least k={k} samples, got {n}")]
    TooFewSamples { n: usize, k: usize },

    #[error("cross-validation needs folds >= 2, got {0}")]
    InvalidFolds(usize),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dtype mismatch: {0}")]
    DtypeMismatch(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("could not place lesion: {0}")]
    LesionPlacement(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
