use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SfbcError {
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing annotation for trajectory {traj_id} segment {segment}")]
    MissingAnnotation { traj_id: u32, segment: usize },

    #[error("weighted dataset is empty after filtering ({0})")]
    EmptyDataset(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("annotation backend error: {0}")]
    Backend(String),

    #[error("endpoint response unsuitable: {0}")]
    UnsuitableEndpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema mismatch in {path}: {detail}")]
    Schema { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SfbcError {
    /// Stable identifier for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            SfbcError::NonFinite { .. } => "non_finite",
            SfbcError::InvalidArgument(_) => "invalid_argument",
            SfbcError::MissingAnnotation { .. } => "missing_annotation",
            SfbcError::EmptyDataset(_) => "empty_dataset",
            SfbcError::Diverged { .. } => "diverged",
            SfbcError::Backend(_) => "backend",
            SfbcError::UnsuitableEndpoint(_) => "unsuitable_endpoint",
            SfbcError::Config(_) => "config",
            SfbcError::Schema { .. } => "schema",
            SfbcError::Io { .. } => "io",
            SfbcError::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SfbcError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = SfbcError> = std::result::Result<T, E>;
