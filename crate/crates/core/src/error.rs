use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dataset files missing: {}", .paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles { paths: Vec<PathBuf> },

    #[error("dataset at {root} is malformed: {message}")]
    Layout { root: PathBuf, message: String },

    #[error("sample {id}: {message}")]
    Structure { id: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("field-of-view mask is empty (threshold {threshold}); try a lower threshold")]
    EmptyFov { threshold: f64 },

    #[error("region mask is empty")]
    EmptyRegion,

    #[error("AUC is undefined when the field of view holds a single class")]
    UndefinedAuc,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration} (non-finite loss)")]
    Diverged { iteration: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
