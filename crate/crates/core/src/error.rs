use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OtrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OtrError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence has no ground truth")]
    NoGroundTruth,

    #[error("depth unavailable inside the region")]
    DepthUnavailable,

    #[error("window center lies outside the image")]
    OutsideImage,

    #[error("patch too small for feature extraction: {0}")]
    PatchTooSmall(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("mask area {area} below minimum {min}")]
    MaskTooSmall { area: usize, min: usize },

    #[error("insufficient geometry: {0} valid points")]
    InsufficientGeometry(usize),

    #[error("insufficient correspondences: {0} accepted pairs")]
    InsufficientCorrespondences(usize),

    #[error("aspect unavailable: model does not project into the image")]
    AspectUnavailable,

    #[error("color-name table: {0}")]
    ColorTable(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("report error: {0}")]
    Report(String),
}

impl OtrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OtrError::Io {
            path: path.into(),
            source,
        }
    }
}
