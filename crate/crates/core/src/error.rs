use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("volume has no slices")]
    EmptyVolume,

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("manifest {path}:{line}: {message}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("patient `{patient}`: missing slice file {path}")]
    MissingSlice { patient: String, path: PathBuf },

    #[error("archive: {0}")]
    Archive(String),

    #[error("non-finite loss component (cls = {cls}, noisy = {noisy})")]
    NonFiniteLoss { cls: f64, noisy: f64 },

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Diverged {
        iteration: usize,
        loss: f64,
        /// Path of the last finite checkpoint, when one was written.
        last_good: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
