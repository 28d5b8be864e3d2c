//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed volume header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: header declares {expected} values, payload holds {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid spacing {0:?}: all entries must be strictly positive")]
    InvalidSpacing(Vec<f64>),

    #[error("invalid grid dims {0:?}: need 2 or 3 axes with at least 2 nodes each")]
    InvalidDims(Vec<usize>),

    #[error("volume payload contains non-finite values")]
    NonFiniteData,

    #[error("unsupported image format: {0}")]
    UnsupportedImage(String),

    #[error("transform group mixes member kinds ({0} vs {1})")]
    HeterogeneousKinds(&'static str, &'static str),

    #[error("free-form deformation meshes differ across group members")]
    MeshMismatch,

    #[error("empty sample set")]
    EmptySampleSet,

    #[error("overlap region is empty")]
    EmptyOverlap,

    #[error("loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("non-finite gradient encountered")]
    NonFiniteGradient,

    #[error("metric '{0}' requires at least {1} images, got {2}")]
    TooFewImages(&'static str, usize, usize),

    #[error("unknown metric key '{0}'")]
    UnknownMetric(String),

    #[error("intensity group has zero variance")]
    ZeroVariance,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed transform file: {0}")]
    MalformedTransform(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
