use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes {0:?}, expected \"TNSR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported tensor dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("tensor rank {0} outside 1..=4")]
    BadRank(usize),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch at layer {layer:?}: {detail}")]
    ShapeMismatch {
        layer: Option<usize>,
        detail: String,
    },
    #[error("unsupported head: {0}")]
    UnsupportedHead(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("embedding length mismatch: {query} vs {reference}")]
    EmbeddingLengthMismatch { query: usize, reference: usize },
    #[error("linearized head was built for a different feature map")]
    OperatingPointMismatch,
    #[error("point ({row}, {col}) outside {height}x{width} grid")]
    PointOutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("degenerate embedding (L2 norm {0:e})")]
    DegenerateEmbedding(f64),
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("activation map has no positive value")]
    EmptyMask,
    #[error("pixel is the exact image center, angle undefined")]
    CenterPixel,
    #[error("embedding index is empty")]
    EmptyIndex,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::BadRank(_) => "bad_rank",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyInput => "empty_input",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::UnsupportedHead(_) => "unsupported_head",
            Error::Manifest(_) => "manifest",
            Error::EmbeddingLengthMismatch { .. } => "embedding_length_mismatch",
            Error::OperatingPointMismatch => "operating_point_mismatch",
            Error::PointOutOfRange { .. } => "point_out_of_range",
            Error::DegenerateEmbedding(_) => "degenerate_embedding",
            Error::ClassOutOfRange { .. } => "class_out_of_range",
            Error::EmptyMask => "empty_mask",
            Error::CenterPixel => "center_pixel",
            Error::EmptyIndex => "empty_index",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(layer: Option<usize>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            layer,
            detail: detail.into(),
        }
    }
}
