use std::fs;
use std::path::{Path, PathBuf};

use corrflow::autoenc::{AeArch, BaseAeConfig};
use corrflow::corrae::CorrAeConfig;
use corrflow::dataio::GeneratorConfig;
use corrflow::diagnostics::{ClassifierConfig, Scorer};
use corrflow::latentflow::{FlowArch, FlowStage, FlowTrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Network widths. The reference widths are `AeArch::full()` and
/// `FlowArch::full()`; the desk defaults divide them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ModelConfig {
    pub ae: AeArch,
    pub flow: FlowArch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { ae: AeArch::narrow(4, 8), flow: FlowArch::narrow(4) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Ensemble size; also the number of members in the auxiliary loss.
    pub m: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { m: 3, epochs: 10, lr: 1e-3, batch: 64 }
    }
}

impl EnsembleConfig {
    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig { epochs: self.epochs, lr: self.lr, batch: self.batch }
    }
}

/// Flow stages. Reference epochs are 5/10/20 with learning rates
/// 2e-4/2e-5/2e-5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct FlowConfig {
    pub ba_epochs: usize,
    pub fm_epochs: usize,
    pub ac_epochs: usize,
    pub lr_ba: f32,
    pub lr_fm: f32,
    pub lr_ac: f32,
    pub batch: usize,
    pub train_steps: usize,
    pub infer_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            ba_epochs: 5,
            fm_epochs: 10,
            ac_epochs: 2,
            lr_ba: 2e-4,
            lr_fm: 2e-4,
            lr_ac: 2e-5,
            batch: 64,
            train_steps: 20,
            infer_steps: 100,
        }
    }
}

impl FlowConfig {
    pub fn stage(&self, stage: FlowStage) -> FlowTrainConfig {
        let (epochs, lr) = match stage {
            FlowStage::Ba => (self.ba_epochs, self.lr_ba),
            FlowStage::Fm => (self.fm_epochs, self.lr_fm),
            FlowStage::Ac => (self.ac_epochs, self.lr_ac),
        };
        FlowTrainConfig {
            batch: self.batch,
            train_steps: self.train_steps,
            euler_steps: self.infer_steps,
            ..FlowTrainConfig::new(stage, epochs, lr)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct EvalConfig {
    /// One latent classifier is trained per seed.
    pub seeds: Vec<u64>,
    pub scorer: Scorer,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], scorer: Scorer::Latent }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub classifiers: EnsembleConfig,
    /// Reference: 300 epochs.
    pub base_ae: BaseAeConfig,
    /// Reference: 50 epochs.
    pub corr_ae: CorrAeConfig,
    pub flow: FlowConfig,
    /// Reference: 30 epochs, batch 64, lr 1e-3.
    pub latent_classifier: ClassifierConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    /// Not part of the fingerprint.
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: GeneratorConfig::default(),
            model: ModelConfig::default(),
            classifiers: EnsembleConfig::default(),
            base_ae: BaseAeConfig { epochs: 10, ..Default::default() },
            corr_ae: CorrAeConfig::default(),
            flow: FlowConfig::default(),
            latent_classifier: ClassifierConfig { epochs: 30, lr: 1e-3, batch: 64 },
            eval: EvalConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the pipeline seed and the data seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let lrs = [
            ("classifiers.lr", self.classifiers.lr),
            ("baseAe.lr", self.base_ae.lr),
            ("corrAe.lr", self.corr_ae.lr),
            ("flow.lrBa", self.flow.lr_ba),
            ("flow.lrFm", self.flow.lr_fm),
            ("flow.lrAc", self.flow.lr_ac),
            ("latentClassifier.lr", self.latent_classifier.lr),
        ];
        if let Some((name, lr)) = lrs.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(CliError::Config(format!("{name} must be positive, got {lr}")));
        }
        let batches = [
            self.classifiers.batch,
            self.base_ae.batch,
            self.corr_ae.batch,
            self.flow.batch,
            self.latent_classifier.batch,
        ];
        if batches.contains(&0) {
            return Err(CliError::Config("batch sizes must be at least 1".into()));
        }
        if self.flow.infer_steps == 0 || self.flow.train_steps == 0 {
            return Err(CliError::Config("flow.trainSteps and flow.inferSteps must be at least 1".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(CliError::Config("eval.seeds must not be empty".into()));
        }
        if self.classifiers.m == 0 {
            return Err(CliError::Config("classifiers.m must be at least 1".into()));
        }
        let levels = &self.model.ae.skip_levels;
        if levels.iter().any(|l| !(1..=3).contains(l)) {
            return Err(CliError::Config(format!("model.ae.skipLevels must be within 1..=3, got {levels:?}")));
        }
        if self.model.flow.latent_channels != self.model.ae.latent_channels {
            return Err(CliError::Config("model.flow.latentChannels must equal model.ae.latentChannels".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON (sorted keys, `outDir` removed).
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("outDir");
        }
        Sha256::digest(value.to_string().as_bytes()).into()
    }

    pub fn fingerprint_hex(&self) -> String {
        hex(&self.fingerprint())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
