use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every domain failure of the pipeline. Display strings start with the
/// variant name so command-line output can be matched on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ConfigNotFound: {0}")]
    ConfigNotFound(PathBuf),
    #[error("ConfigInvalid({field}): {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("SampleInvalid: {0}")]
    SampleInvalid(String),
    #[error("CheckpointCorrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("CheckpointIncomplete: missing {0}")]
    CheckpointIncomplete(String),
    #[error("DatasetWriteError: {0}")]
    DatasetWriteError(String),
    #[error("RemapInvalid: {0}")]
    RemapInvalid(String),
    #[error("MaskInvalid: {0}")]
    MaskInvalid(String),
    #[error("AggregateInvalid: {0}")]
    AggregateInvalid(String),
    #[error("ShapeError: {0}")]
    Shape(String),
    #[error("LossSpecError: {0}")]
    LossSpec(String),
    #[error("StagePrereqError: {0}")]
    StagePrereq(String),
    #[error("TrainingDiverged: {reason} (last good checkpoint: {last_good:?})")]
    TrainingDiverged { reason: String, last_good: Option<PathBuf> },
    #[error("EvalEmptyError: {0}")]
    EvalEmpty(String),
    #[error("IoError: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable name of the error kind.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ConfigNotFound(_) => "ConfigNotFound",
            Error::ConfigInvalid { .. } => "ConfigInvalid",
            Error::SampleInvalid(_) => "SampleInvalid",
            Error::CheckpointCorrupt(_) => "CheckpointCorrupt",
            Error::CheckpointIncomplete(_) => "CheckpointIncomplete",
            Error::DatasetWriteError(_) => "DatasetWriteError",
            Error::RemapInvalid(_) => "RemapInvalid",
            Error::MaskInvalid(_) => "MaskInvalid",
            Error::AggregateInvalid(_) => "AggregateInvalid",
            Error::Shape(_) => "ShapeError",
            Error::LossSpec(_) => "LossSpecError",
            Error::StagePrereq(_) => "StagePrereqError",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::EvalEmpty(_) => "EvalEmptyError",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::ConfigInvalid { field: field.to_string(), reason: reason.into() }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
