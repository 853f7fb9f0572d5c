//! Malignancy classifiers and evaluation metrics.

mod classifiers;
mod evaluate;
mod metrics;

pub use classifiers::{
    followup_images, latent_classifier_spec, pixel_classifier_spec, pooled_images, train_latent_classifier,
    train_pixel_ensemble, BinaryClassifier, ClassifierConfig, PixelEnsemble,
};
pub use evaluate::{
    evaluate_diagnosis, latent_training_set, reports_csv, train_latent_classifiers, EvalComponents, EvalMode, MeanSd,
    MetricsReport, Scorer, SeedMetrics,
};
pub use metrics::{auprc, auroc, latent_frechet, spearman, ssim, SSIM_C1, SSIM_C2, SSIM_WINDOW};

use crate::corrae::CorrAeError;
use crate::latentflow::FlowError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("scores must be finite")]
    NonFinite,
    #[error("both classes must be present")]
    SingleClass,
    #[error("at least one positive is required")]
    NoPositives,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("shape mismatch {left:?} vs {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },
}

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    CorrAe(#[from] CorrAeError),
    #[error(transparent)]
    Flow(Box<FlowError>),
    #[error("training set contains a single class")]
    SingleClass,
    #[error("classifier architecture mismatch: {0}")]
    Architecture(String),
    #[error("classifier loss diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("missing component: {0}")]
    MissingComponent(String),
}

impl From<FlowError> for DiagnosticsError {
    fn from(e: FlowError) -> Self {
        DiagnosticsError::Flow(Box::new(e))
    }
}
