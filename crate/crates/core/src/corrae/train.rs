use serde::{Deserialize, Serialize};

use super::{batch_pearson, record_corr_loss, Branches, CorrAEModel, CorrAeError, Lambdas};
use crate::autoenc::{joined, record_disc_loss, warmup_steps, PerceptualExtractor};
use crate::batching::{batches_per_epoch, epoch_order, epoch_rng, image_batch};
use crate::dataio::ImagePairRecord;
use crate::tensor::{adam_step, AdamConfig, AdamState, Array, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct CorrAeConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub lambdas: Lambdas,
    pub adv_warmup: f32,
}

impl Default for CorrAeConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 2e-4, batch: 64, lambdas: Lambdas::default(), adv_warmup: 0.1 }
    }
}

/// Mean train losses of one epoch plus the validation correlation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrEpoch {
    pub epoch: usize,
    pub sr: f32,
    pub cr: f32,
    pub corr: f32,
    pub disc: f32,
    pub val_pearson: f32,
}

impl CorrEpoch {
    pub const CSV_HEADER: &'static str = "epoch,sr,cr,corr,disc,val_pearson";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.sr, self.cr, self.corr, self.disc, self.val_pearson)
    }
}

#[derive(Clone, Debug)]
pub struct CorrAeOutcome {
    /// Frozen.
    pub model: CorrAEModel,
    pub curves: Vec<CorrEpoch>,
    pub val_pearson_init: f32,
}

/// Batch Pearson of `E₀(x₀)` against `E₁(x₁)` over all of `records` at once.
pub fn validation_pearson(model: &CorrAEModel, records: &[ImagePairRecord]) -> Result<f32, CorrAeError> {
    if records.len() < 2 {
        return Ok(0.0);
    }
    let x0 = image_batch(records.iter().map(|r| &r.x0))?;
    let x1 = image_batch(records.iter().map(|r| &r.x1))?;
    batch_pearson(&model.encode0(&x0)?.z, &model.encode1(&x1)?.z)
}

fn stack_batch(parts: &[&Array]) -> Result<Array, CorrAeError> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|a| a.batch()).sum();
    let data: Vec<f32> = parts.iter().flat_map(|a| a.data().iter().copied()).collect();
    Ok(Array::from_vec(&shape, data)?)
}

/// Trains both branches on paired scans of `train` and returns them frozen.
pub fn train_corr_ae(
    train: &[ImagePairRecord],
    val: &[ImagePairRecord],
    model: CorrAEModel,
    phi: &PerceptualExtractor,
    cfg: &CorrAeConfig,
    seed: u64,
) -> Result<CorrAeOutcome, CorrAeError> {
    if model.frozen {
        return Err(CorrAeError::Frozen);
    }
    if train.is_empty() {
        return Err(CorrAeError::EmptyData);
    }
    let x0s = image_batch(train.iter().map(|r| &r.x0))?;
    let x1s = image_batch(train.iter().map(|r| &r.x1))?;
    let val_pearson_init = validation_pearson(&model, val)?;
    let n = train.len();
    let per_epoch = batches_per_epoch(n, cfg.batch);
    let warmup = warmup_steps(per_epoch * cfg.epochs, cfg.adv_warmup);
    let adam = AdamConfig::with_lr(cfg.lr);

    let mut current = model;
    let mut gen = joined(&[("e0.", &current.e0), ("e1.", &current.e1), ("d0.", &current.d0), ("d1.", &current.d1)]);
    let (mut gen_state, mut disc_state) = (AdamState::default(), AdamState::default());
    let seeds = current.stores().map(|(_, s)| s.seed());
    let unpack = |gen: &ParamStore, m: &mut CorrAEModel| {
        for (i, (prefix, slot)) in [("e0.", &mut m.e0), ("e1.", &mut m.e1), ("d0.", &mut m.d0), ("d1.", &mut m.d1)]
            .into_iter()
            .enumerate()
        {
            *slot = gen.strip_prefix(prefix);
            slot.set_seed(seeds[i]);
        }
    };
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, &mut epoch_rng(seed, epoch));
        let mut sums = [0.0f64; 4];
        for b in 0..per_epoch {
            let idx = &order[b * cfg.batch..((b + 1) * cfg.batch).min(n)];
            let (x0, x1) = (x0s.gather(idx), x1s.gather(idx));
            let adv_weight = if step < warmup { 0.0 } else { 1.0 };

            let mut tape = Tape::new();
            let g = tape.bind(&gen);
            let p = Branches { e0: g.scope("e0."), e1: g.scope("e1."), d0: g.scope("d0."), d1: g.scope("d1.") };
            let s = tape.bind_frozen(&current.disc.params);
            let (v0, v1) = (tape.constant(x0.clone()), tape.constant(x1.clone()));
            let vars = record_corr_loss(&mut tape, &current.arch, &p, v0, v1, phi, &current.disc, &s, current.lambdas, adv_weight)?;
            let loss = vars.read(&tape);
            if !loss.total.is_finite() {
                unpack(&gen, &mut current);
                return Err(CorrAeError::Diverged { epoch, step: b, last_good: Box::new(current) });
            }
            let grads = tape.backward_scalar(vars.total)?;
            let [y00, y11, y01, y10] = vars.outputs.map(|v| tape.value(v).clone());
            drop(tape);
            adam_step(&mut gen, &grads, &mut gen_state, adam)?;

            let real = stack_batch(&[&x0, &x1, &x0, &x1])?;
            let fake = stack_batch(&[&y00, &y11, &y01, &y10])?;
            let mut tape = Tape::new();
            let s = tape.bind(&current.disc.params);
            let (r, f) = (tape.constant(real), tape.constant(fake));
            let dl = record_disc_loss(&mut tape, &current.disc, &s, r, f)?;
            let dval = tape.value(dl).item();
            if !dval.is_finite() {
                unpack(&gen, &mut current);
                return Err(CorrAeError::Diverged { epoch, step: b, last_good: Box::new(current) });
            }
            let dgrads = tape.backward_scalar(dl)?;
            drop(tape);
            adam_step(&mut current.disc.params, &dgrads, &mut disc_state, adam)?;

            let w = idx.len() as f64;
            for (acc, v) in sums.iter_mut().zip([loss.sr, loss.cr, loss.corr, dval]) {
                *acc += v as f64 * w;
            }
            step += 1;
        }
        unpack(&gen, &mut current);
        let val_pearson = validation_pearson(&current, val)?;
        let m = |i: usize| (sums[i] / n as f64) as f32;
        curves.push(CorrEpoch { epoch: epoch + 1, sr: m(0), cr: m(1), corr: m(2), disc: m(3), val_pearson });
    }
    current.frozen = true;
    Ok(CorrAeOutcome { model: current, curves, val_pearson_init })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::{AeArch, AutoencoderModel, Discriminator};
    use crate::corrae::init_from_base;
    use crate::dataio::{generate, split_of, GeneratorConfig, Split};
    use crate::diagnostics::{pixel_classifier_spec, BinaryClassifier};

    fn setup() -> (Vec<ImagePairRecord>, Vec<ImagePairRecord>, CorrAEModel, PerceptualExtractor) {
        let cfg = GeneratorConfig { n_subjects: 24, image_size: 32, seed: 2, ..Default::default() };
        let data: Vec<ImagePairRecord> = generate(&cfg).unwrap().into_iter().map(|s| s.record).collect();
        let arch = AeArch::narrow(8, 16);
        let base = AutoencoderModel::new(arch.clone(), 1);
        let model = init_from_base(&base, &Discriminator::new(&arch, 32, 2), Lambdas::default()).unwrap();
        let phi = PerceptualExtractor::from_classifier(&BinaryClassifier::new(pixel_classifier_spec(32), 0)).unwrap();
        (split_of(&data, Split::Train), split_of(&data, Split::Val), model, phi)
    }

    #[test]
    fn zero_epochs_freezes_the_warm_start() {
        let (train, val, model, phi) = setup();
        let cfg = CorrAeConfig { epochs: 0, ..Default::default() };
        let out = train_corr_ae(&train, &val, model.clone(), &phi, &cfg, 0).unwrap();
        assert!(out.model.is_frozen());
        assert_eq!(out.model.fingerprint(), model.fingerprint());
        assert!(matches!(train_corr_ae(&train, &val, out.model, &phi, &cfg, 0), Err(CorrAeError::Frozen)));
    }

    #[test]
    fn one_step_separates_the_encoders() {
        let (train, val, model, phi) = setup();
        let cfg = CorrAeConfig { epochs: 1, batch: train.len(), lr: 1e-3, ..Default::default() };
        let out = train_corr_ae(&train, &val, model, &phi, &cfg, 0).unwrap();
        assert_ne!(out.model.e0(), out.model.e1());
        assert_ne!(out.model.d0(), out.model.d1());
        assert_eq!(out.curves.len(), 1);
        assert!(out.curves[0].val_pearson.is_finite());
    }
}
