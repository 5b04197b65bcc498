//! Datasets, experiment configuration and run directories.

mod cifar;
mod experiment;
mod shapes;

use std::path::Path;

use thiserror::Error;

pub use cifar::{parse_cifar_binary, read_cifar_binary, LabeledImages, RECORD_LEN};
pub use experiment::{
    emit_tables, read_manifest, read_metrics, run_experiment, run_loaded, verify_manifest, write_manifest, AttackerSection,
    DatasetSection, EvalSection, ExperimentConfig, LoadedConfig, ModelKind, ModelSection, Preset, RunOverrides, RunSummary,
    SignatureSource, TrainSection, TriggerSource, UchidaSource, WatermarkSource, CHECKPOINT_FILE, CONFIG_FILE, MANIFEST,
    METRICS_FILE, REPORT_FILE, TABLE_HEADER,
};
pub use shapes::{generate_shapes, ShapeKind, SyntheticShapesSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        DataError::Io(format!("{}: {e}", path.display()))
    }
}
