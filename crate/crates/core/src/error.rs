use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the grading pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest is missing required column `{column}`")]
    Schema { column: String },

    #[error("invalid data at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("could not decode image: {0}")]
    Decode(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training failed for {stage}: {message}")]
    Training { stage: String, message: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("labeling error for {vu_id}: {message}")]
    Labeling { vu_id: String, message: String },

    #[error("report error: {0}")]
    Report(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("model artifact error: {0}")]
    Artifact(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[cfg(feature = "deep")]
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short machine-readable category, used in run error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema { .. } => "schema",
            Error::Validation { .. } => "validation",
            Error::InvalidInput(_) => "invalid_input",
            Error::Decode(_) => "decode",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::Contract(_) => "contract",
            Error::Labeling { .. } => "labeling",
            Error::Report(_) => "report",
            Error::Aggregation(_) => "aggregation",
            Error::Artifact(_) => "artifact",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            #[cfg(feature = "deep")]
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn training(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Training {
            stage: stage.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
