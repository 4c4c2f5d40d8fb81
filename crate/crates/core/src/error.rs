use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid illuminant {0:?}: components must be finite, nonnegative and not all zero")]
    InvalidIlluminant([f64; 3]),

    #[error("illuminant channel {channel} is {value}; correction requires strictly positive channels")]
    DivisionByZero { channel: usize, value: f64 },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("image too small: {0}")]
    ImageTooSmall(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate estimate: {0}")]
    DegenerateEstimate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric fault in {0}: non-finite value")]
    NumericFault(String),

    #[error("sampling impossible: {0}")]
    SamplingImpossible(String),

    #[error("estimation impossible: {0}")]
    EstimationImpossible(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing model for fold {0}")]
    MissingModel(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidIlluminant(_) => "invalid-illuminant",
            Error::DivisionByZero { .. } => "division-by-zero",
            Error::InvalidImage(_) => "invalid-image",
            Error::ImageTooSmall(_) => "image-too-small",
            Error::Format { .. } => "format",
            Error::Parameter(_) => "parameter",
            Error::DegenerateEstimate(_) => "degenerate-estimate",
            Error::Shape(_) => "shape-mismatch",
            Error::NumericFault(_) => "numeric-fault",
            Error::SamplingImpossible(_) => "sampling-impossible",
            Error::EstimationImpossible(_) => "estimation-impossible",
            Error::Empty(_) => "empty",
            Error::Dataset(_) => "dataset",
            Error::MissingModel(_) => "missing-model",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
