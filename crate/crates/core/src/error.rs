use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the splatting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid camera rig: {0}")]
    InvalidRig(String),

    #[error("backprojection needs a positive depth, got {0}")]
    NonPositiveDepth(f64),

    #[error("degenerate temporal extent: Z = {0:e} is below 1e-12")]
    DegenerateTemporalExtent(f64),

    #[error("tile {tile} holds {count} fragments, above the cap of {cap}")]
    TileOverflow { tile: usize, count: usize, cap: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(
        "point-cloud fusion kept no pixels; relax the score threshold or the probability threshold"
    )]
    EmptyFusion,

    #[error("non-finite value in loss term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: &'static str, iteration: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed {format} data: {message}")]
    Format { format: &'static str, message: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    PngDecode(#[from] png::DecodingError),

    #[error(transparent)]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format { format, message: message.into() }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::InvalidConfig(message.into())
    }
}
