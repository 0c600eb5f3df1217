use std::path::{Path, PathBuf};

use neuropath::data::DataError;
use neuropath::dsp::DspError;
use neuropath::skeleton::SkeletonError;
use neuropath::training::TrainingError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: no such file or directory")]
    MissingFile { path: PathBuf },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

fn io_code(path: &Path) -> &'static str {
    if path.exists() {
        "io"
    } else {
        "missing_file"
    }
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            Self::MissingFile { path: path.to_path_buf() }
        } else {
            Self::Io { path: path.to_path_buf(), message: e.to_string() }
        }
    }

    /// Stable machine-readable identifier printed before the message.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::MissingFile { .. } => "missing_file",
            Self::Io { .. } => "io",
            Self::Config(_) => "config_invalid",
            Self::Data(e) => match e {
                DataError::Io { path, .. } => io_code(path),
                DataError::Synth(_) => "config_invalid",
                DataError::VersionMismatch { .. } => "format_version",
                _ => "dataset_invalid",
            },
            Self::Skeleton(e) => match e {
                SkeletonError::Data(DataError::Io { path, .. }) => io_code(path),
                SkeletonError::Config(_) | SkeletonError::UnknownClass { .. } => "config_invalid",
                _ => "dataset_invalid",
            },
            Self::Training(e) => match e {
                TrainingError::Config(_) => "config_invalid",
                TrainingError::AdapterMissing { .. } => "adapter_missing",
                TrainingError::EmptyDataset(_) => "empty_dataset",
                TrainingError::ClassMismatch(_) => "class_mismatch",
                TrainingError::Checkpoint(_) => "checkpoint_invalid",
                TrainingError::CheckpointVersion { .. } => "format_version",
                TrainingError::Io { path, .. } => io_code(path),
                TrainingError::Adapter(_) | TrainingError::Decoder(_) => "config_invalid",
                TrainingError::Skeleton(_) | TrainingError::Numerics(_) => "internal",
            },
            Self::Dsp(_) => "analysis_failed",
        }
    }

    /// `code: message` on one line.
    pub fn line(&self) -> String {
        let message = self.to_string().replace('\n', " ");
        format!("{}: {}", self.code(), message)
    }
}
