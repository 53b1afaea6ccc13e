use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("zero-sized output: {0}")]
    EmptyOutput(String),

    #[error("odd spatial extent {h}x{w}; 2x2 pooling needs even extents")]
    OddExtent { h: usize, w: usize },

    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    #[error("feature map {h}x{w} cannot hold a {patch}x{patch} patch")]
    MapTooSmall { h: usize, w: usize, patch: usize },

    #[error("coordinate ({row}, {col}) out of range for a {h}x{w} map")]
    OutOfRange {
        row: usize,
        col: usize,
        h: usize,
        w: usize,
    },

    #[error("not enough distinct negative positions: need {needed}, have {available}")]
    NotEnoughNegatives { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("weight binary length mismatch: manifest declares {expected} bytes, file has {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch in layer `{layer}`: expected {expected:?}, found {found:?}")]
    LayerShape {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
