use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    ac_loss, ac_signs, ba_loss, ba_loss_and_step, endpoint_error, fm_loss, record_ac_loss, record_fm_loss,
    straightness, FlowError, FlowField, LatentPairs,
};
use crate::batching::{batches_per_epoch, epoch_order, epoch_rng, image_batch};
use crate::corrae::CorrAEModel;
use crate::dataio::{ImagePairRecord, Label};
use crate::diagnostics::BinaryClassifier;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowStage {
    Ba,
    Fm,
    Ac,
}

impl FlowStage {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowStage::Ba => "ba",
            FlowStage::Fm => "fm",
            FlowStage::Ac => "ac",
        }
    }
}

impl fmt::Display for FlowStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub stage: FlowStage,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Euler steps inside the background-alignment and auxiliary objectives.
    pub train_steps: usize,
    /// Euler steps for endpoint evaluation and inference.
    pub euler_steps: usize,
}

impl FlowTrainConfig {
    pub fn new(stage: FlowStage, epochs: usize, lr: f32) -> Self {
        Self { stage, epochs, lr, batch: 64, train_steps: 20, euler_steps: 100 }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.lr > 0.0) {
            return Err(FlowError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.euler_steps == 0 || self.train_steps == 0 || self.batch == 0 {
            return Err(FlowError::Config("step counts and batch size must be at least 1".into()));
        }
        Ok(())
    }

    fn expect(&self, stage: FlowStage) -> Result<(), FlowError> {
        self.validate()?;
        if self.stage != stage {
            return Err(FlowError::Config(format!("{} configuration passed to the {stage} stage", self.stage)));
        }
        Ok(())
    }
}

/// One epoch of a flow stage. `val_loss` is the stage objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowEpoch {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_endpoint: f32,
    /// Reported by the flow-matching stage; zero elsewhere.
    pub straightness: f32,
}

impl FlowEpoch {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_endpoint,straightness";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.train_loss, self.val_loss, self.val_endpoint, self.straightness)
    }
}

#[derive(Clone, Debug)]
pub struct FlowOutcome {
    pub field: FlowField,
    pub curves: Vec<FlowEpoch>,
    pub val_loss_init: f32,
    pub val_endpoint_init: f32,
}

impl FlowOutcome {
    pub fn final_endpoint(&self) -> f32 {
        self.curves.last().map_or(self.val_endpoint_init, |c| c.val_endpoint)
    }
}

fn diverged(stage: FlowStage, epoch: usize, step: usize, field: &FlowField) -> FlowError {
    FlowError::Diverged { stage, epoch, step, last_good: Box::new(field.clone()) }
}

/// Background alignment on nodule-free pairs.
pub fn train_ba(
    field: FlowField,
    train: &LatentPairs,
    val: &LatentPairs,
    cfg: &FlowTrainConfig,
    seed: u64,
) -> Result<FlowOutcome, FlowError> {
    cfg.expect(FlowStage::Ba)?;
    train.check_background()?;
    val.check_background()?;
    if train.is_empty() {
        return Err(FlowError::EmptyData);
    }
    let val_loss = |f: &FlowField| ba_loss(f, &val.z0, &val.z1, cfg.train_steps);
    let val_endpoint = |f: &FlowField| endpoint_error(f, val, cfg.euler_steps);
    let (val_loss_init, val_endpoint_init) = (val_loss(&field)?, val_endpoint(&field)?);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::default();
    let mut field = field;
    let n = train.len();
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, &mut epoch_rng(seed, epoch));
        let mut sum = 0.0f64;
        for b in 0..batches_per_epoch(n, cfg.batch) {
            let idx = &order[b * cfg.batch..((b + 1) * cfg.batch).min(n)];
            let before = field.clone();
            let loss = match ba_loss_and_step(&mut field, &mut state, &train.gather(idx), cfg.train_steps, adam) {
                Err(FlowError::NonFinite { .. }) => f32::NAN,
                other => other?,
            };
            if !loss.is_finite() || !field.params.iter().all(|(_, a)| a.is_finite()) {
                return Err(diverged(FlowStage::Ba, epoch, b, &before));
            }
            sum += loss as f64 * idx.len() as f64;
        }
        curves.push(FlowEpoch {
            epoch: epoch + 1,
            train_loss: (sum / n as f64) as f32,
            val_loss: val_loss(&field)?,
            val_endpoint: val_endpoint(&field)?,
            straightness: 0.0,
        });
    }
    Ok(FlowOutcome { field, curves, val_loss_init, val_endpoint_init })
}

/// Validation flow-matching loss at fixed, evenly spaced times.
fn fm_val_loss(field: &FlowField, val: &LatentPairs) -> Result<f32, FlowError> {
    let n = val.len();
    let t: Vec<f32> = (0..n).map(|i| (i as f32 + 0.5) / n as f32).collect();
    fm_loss(field, &val.z0, &val.z1, &t)
}

/// Rectified flow matching with independent `t ~ U[0, 1)` per item.
pub fn train_fm(
    field: FlowField,
    train: &LatentPairs,
    val: &LatentPairs,
    cfg: &FlowTrainConfig,
    seed: u64,
) -> Result<FlowOutcome, FlowError> {
    cfg.expect(FlowStage::Fm)?;
    if train.is_empty() {
        return Err(FlowError::EmptyData);
    }
    let val_endpoint = |f: &FlowField| endpoint_error(f, val, cfg.euler_steps);
    let (val_loss_init, val_endpoint_init) = (fm_val_loss(&field, val)?, val_endpoint(&field)?);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::default();
    let mut field = field;
    let n = train.len();
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(seed, epoch);
        let order = epoch_order(n, &mut rng);
        let mut sum = 0.0f64;
        for b in 0..batches_per_epoch(n, cfg.batch) {
            let idx = &order[b * cfg.batch..((b + 1) * cfg.batch).min(n)];
            let batch = train.gather(idx);
            let t: Vec<f32> = idx.iter().map(|_| rng.gen::<f32>()).collect();
            let mut tape = Tape::new();
            let p = tape.bind(&field.params);
            let l = record_fm_loss(&mut tape, &field, &p, &batch.z0, &batch.z1, &t)?;
            let loss = tape.value(l).item();
            if !loss.is_finite() {
                return Err(diverged(FlowStage::Fm, epoch, b, &field));
            }
            let grads = tape.backward_scalar(l)?;
            drop(tape);
            adam_step(&mut field.params, &grads, &mut state, adam)?;
            sum += loss as f64 * idx.len() as f64;
        }
        curves.push(FlowEpoch {
            epoch: epoch + 1,
            train_loss: (sum / n as f64) as f32,
            val_loss: fm_val_loss(&field, val)?,
            val_endpoint: val_endpoint(&field)?,
            straightness: straightness(&field, val, cfg.euler_steps)?,
        });
    }
    Ok(FlowOutcome { field, curves, val_loss_init, val_endpoint_init })
}

#[derive(Clone, Debug)]
pub struct AcOutcome {
    /// The epoch with the lowest validation auxiliary loss that kept the
    /// endpoint error within the guard rail (or the input field).
    pub field: FlowField,
    pub curves: Vec<FlowEpoch>,
    pub val_loss_init: f32,
    pub val_endpoint_init: f32,
    /// 0 when no epoch improved on the input field.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Relative endpoint-error growth tolerated during auxiliary finetuning.
pub const AC_ENDPOINT_SLACK: f32 = 0.25;

fn labeled(records: &[ImagePairRecord]) -> Result<(), FlowError> {
    match records.iter().position(|r| r.label == Label::None) {
        Some(index) => Err(FlowError::Unlabeled { index }),
        None => Ok(()),
    }
}

/// Validation auxiliary loss, item-weighted over chunks.
fn ac_val_loss(
    field: &FlowField,
    model: &CorrAEModel,
    ensemble: &[BinaryClassifier],
    val: &[ImagePairRecord],
    steps: usize,
) -> Result<f32, FlowError> {
    let mut sum = 0.0f64;
    for chunk in val.chunks(128) {
        let x0 = image_batch(chunk.iter().map(|r| &r.x0))?;
        let labels: Vec<Label> = chunk.iter().map(|r| r.label).collect();
        sum += ac_loss(field, model, ensemble, &x0, &labels, steps)? as f64 * chunk.len() as f64;
    }
    Ok((sum / val.len().max(1) as f64) as f32)
}

/// Auxiliary-classifier finetuning on labelled nodule records. The corr-AE
/// and the classifiers are only read.
pub fn finetune_ac(
    field: FlowField,
    model: &CorrAEModel,
    ensemble: &[BinaryClassifier],
    train: &[ImagePairRecord],
    val: &[ImagePairRecord],
    cfg: &FlowTrainConfig,
    seed: u64,
) -> Result<AcOutcome, FlowError> {
    cfg.expect(FlowStage::Ac)?;
    labeled(train)?;
    labeled(val)?;
    if train.is_empty() {
        return Err(FlowError::EmptyData);
    }
    let val_pairs = LatentPairs::encode(model, val)?;
    let val_endpoint = |f: &FlowField| endpoint_error(f, &val_pairs, cfg.euler_steps);
    let val_loss_init = ac_val_loss(&field, model, ensemble, val, cfg.train_steps)?;
    let val_endpoint_init = val_endpoint(&field)?;
    let limit = val_endpoint_init * (1.0 + AC_ENDPOINT_SLACK);
    let x0s = image_batch(train.iter().map(|r| &r.x0))?;
    let labels: Vec<Label> = train.iter().map(|r| r.label).collect();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::default();
    let mut current = field.clone();
    let (mut best, mut best_loss, mut best_epoch) = (field, val_loss_init, 0);
    let mut stopped_early = false;
    let n = train.len();
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, &mut epoch_rng(seed, epoch));
        let mut sum = 0.0f64;
        for b in 0..batches_per_epoch(n, cfg.batch) {
            let idx = &order[b * cfg.batch..((b + 1) * cfg.batch).min(n)];
            let enc = model.encode0(&x0s.gather(idx))?;
            let lab: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
            let signs = ac_signs(&lab)?;
            let mut tape = Tape::new();
            let p = tape.bind(&current.params);
            let l = match record_ac_loss(&mut tape, &current, &p, model, ensemble, &enc, &signs, cfg.train_steps) {
                Err(FlowError::NonFinite { .. }) => return Err(diverged(FlowStage::Ac, epoch, b, &best)),
                other => other?,
            };
            let loss = tape.value(l).item();
            if !loss.is_finite() {
                return Err(diverged(FlowStage::Ac, epoch, b, &best));
            }
            let grads = tape.backward_scalar(l)?;
            drop(tape);
            adam_step(&mut current.params, &grads, &mut state, adam)?;
            sum += loss as f64 * idx.len() as f64;
        }
        let row = FlowEpoch {
            epoch: epoch + 1,
            train_loss: (sum / n as f64) as f32,
            val_loss: ac_val_loss(&current, model, ensemble, val, cfg.train_steps)?,
            val_endpoint: val_endpoint(&current)?,
            straightness: 0.0,
        };
        curves.push(row);
        if row.val_endpoint > limit {
            stopped_early = true;
            break;
        }
        if row.val_loss < best_loss {
            (best, best_loss, best_epoch) = (current.clone(), row.val_loss, epoch + 1);
        }
    }
    Ok(AcOutcome { field: best, curves, val_loss_init, val_endpoint_init, best_epoch, stopped_early })
}
