use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum UstError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("value out of range in {context}: {value} outside [-1, 1]")]
    OutOfRange { context: String, value: f64 },

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown decoder id `{0}`")]
    UnknownDecoder(String),

    #[error("AdaIN parameters built for decoder {got}, but decoder {expected} was requested")]
    WrongDecoder { expected: String, got: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl UstError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UstError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        UstError::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Short machine-readable tag, used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            UstError::ShapeMismatch { .. } => "shape_mismatch",
            UstError::Contract(_) => "contract",
            UstError::EmptyMask(_) => "empty_mask",
            UstError::NonFinite(_) => "non_finite",
            UstError::OutOfRange { .. } => "out_of_range",
            UstError::NonFiniteLoss { .. } => "non_finite_loss",
            UstError::Config(_) => "config",
            UstError::UnknownDecoder(_) => "unknown_decoder",
            UstError::WrongDecoder { .. } => "wrong_decoder",
            UstError::Checkpoint(_) => "checkpoint",
            UstError::Dataset(_) => "dataset",
            UstError::MissingFile(_) => "missing_file",
            UstError::Io { .. } => "io",
            UstError::Image { .. } => "image",
            UstError::Json(_) => "json",
            UstError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, UstError>;
