use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    /// Malformed parsing-map header or payload.
    #[error("malformed parsing map: {0}")]
    MalformedParsingMap(String),

    #[error("out-of-taxonomy label {label} at pixel ({x}, {y})")]
    OutOfTaxonomyLabel { label: u8, x: usize, y: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid mask request: {0}")]
    Mask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("index {index} out of range for manifest of {len} records")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("structural mismatch between branches: {0}")]
    Structure(String),

    #[error("invalid loss input: {0}")]
    Loss(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: usize, dump: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than a failure at run time.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MalformedParsingMap(_)
                | Error::OutOfTaxonomyLabel { .. }
                | Error::DimensionMismatch(_)
                | Error::Mask(_)
                | Error::Config(_)
                | Error::Manifest(_)
                | Error::IndexOutOfRange { .. }
                | Error::Json(_)
        )
    }
}
