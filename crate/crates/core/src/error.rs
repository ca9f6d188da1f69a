use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point correspondence: {0}")]
    DegenerateCorrespondence(String),

    #[error("point maps to infinity (homogeneous w = {w:e})")]
    PointAtInfinity { w: f64 },

    #[error("misalignment parameters infeasible: {0} consecutive rejections")]
    InfeasibleParams(usize),

    #[error("alignment failed for {image}: {reason}")]
    AlignmentFailure { image: String, reason: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("unknown layer tap `{0}`")]
    UnknownLayer(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("insufficient normal samples: need at least {needed}, got {got}")]
    InsufficientNormals { needed: usize, got: usize },

    #[error("AUROC undefined: only one class present")]
    SingleClass,

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("backbone `{id}` needs pretrained weights: {reason}")]
    BackboneUnavailable { id: String, reason: String },

    #[error("config hash mismatch: model was fitted with {model}, extractor has {extractor}")]
    ConfigHashMismatch { model: String, extractor: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{0}")]
    Invalid(String),

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors the caller caused (bad config, bad input), as opposed to
    /// failures while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::InvalidSpec(_)
                | Error::UnknownBackbone(_)
                | Error::UnknownLayer(_)
        )
    }
}
