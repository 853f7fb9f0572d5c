//! Pipeline runner for corrflow: run directories, `CFCK` checkpoints,
//! the ablation and λ sweeps, and the gradient-check suite.

pub mod checkpoint;
pub mod config;
pub mod gradsuite;
pub mod harness;
pub mod pipeline;
pub mod plot;

use std::path::Path;

use corrflow::autoenc::AutoencError;
use corrflow::corrae::CorrAeError;
use corrflow::dataio::DataError;
use corrflow::diagnostics::{DiagnosticsError, MetricError};
use corrflow::latentflow::FlowError;
use corrflow::tensor::TensorError;

pub use checkpoint::{CheckpointError, Checkpoint};
pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, run_until, Artifacts, Dataset, Run, Stage, StageMetrics};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autoenc(#[from] AutoencError),
    #[error(transparent)]
    CorrAe(#[from] CorrAeError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("stage {stage}: {source}")]
    Stage { stage: String, source: Box<CliError> },
    #[error("{dir} was created by config {expected}, not {found}")]
    ResumeMismatch { dir: String, expected: String, found: String },
    #[error("{path} carries fingerprint {found}, expected {expected}")]
    StaleCheckpoint { path: String, found: String, expected: String },
    #[error("missing {0}")]
    Missing(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// The innermost error beneath any stage wrappers.
    pub fn root(&self) -> &CliError {
        match self {
            CliError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
