use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// One rejected input row.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct RowError {
    /// 1-based data row number (the header row is not counted).
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("{} invalid row(s); first: row {}: {}", .rejected.len(), .rejected[0].row, .rejected[0].message)]
    Validation {
        accepted: usize,
        rejected: Vec<RowError>,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("split: {0}")]
    Split(String),

    #[error("canonical file: {0}")]
    Format(String),

    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("encoder: {0}")]
    Encoder(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("training: {0}")]
    Training(String),

    #[error("tuning: {0}")]
    Tuning(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("experiment: {0}")]
    Experiment(String),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
