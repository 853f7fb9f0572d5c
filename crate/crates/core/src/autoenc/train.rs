use serde::{Deserialize, Serialize};

use super::{
    record_decoder, record_disc_loss, record_encoder, record_recon_loss, AeLoss, AutoencError, AutoencoderModel,
    Discriminator, PerceptualExtractor,
};
use crate::batching::{batches_per_epoch, epoch_order, epoch_rng, image_batch};
use crate::dataio::ImagePairRecord;
use crate::tensor::{adam_step, AdamConfig, AdamState, Array, ParamStore, Tape, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct BaseAeConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Fraction of steps with the adversarial term switched off.
    pub adv_warmup: f32,
}

impl Default for BaseAeConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 2e-4, batch: 64, adv_warmup: 0.1 }
    }
}

/// Mean train losses of one epoch plus validation reconstruction error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeEpoch {
    pub epoch: usize,
    pub l2: f32,
    pub perc: f32,
    pub adv: f32,
    pub disc: f32,
    pub val_l2: f32,
}

impl AeEpoch {
    pub const CSV_HEADER: &'static str = "epoch,l2,perc,adv,disc,val_l2";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.l2, self.perc, self.adv, self.disc, self.val_l2)
    }
}

#[derive(Clone, Debug)]
pub struct BaseAeOutcome {
    pub model: AutoencoderModel,
    pub disc: Discriminator,
    pub curves: Vec<AeEpoch>,
    pub val_l2_init: f32,
}

/// Pooled baseline and follow-up images of every record.
pub(crate) fn pooled(records: &[ImagePairRecord]) -> Result<Array, TensorError> {
    image_batch(records.iter().map(|r| &r.x0).chain(records.iter().map(|r| &r.x1)))
}

/// Mean pixel MSE of `model` reconstructions over a batch, chunked.
pub fn reconstruction_l2(model: &AutoencoderModel, images: &Array) -> Result<f32, AutoencError> {
    let n = images.batch();
    let mut total = 0.0f64;
    for start in (0..n).step_by(128) {
        let idx: Vec<usize> = (start..(start + 128).min(n)).collect();
        let x = images.gather(&idx);
        let y = model.reconstruct(&x)?;
        total += y.data().iter().zip(x.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
    }
    Ok((total / images.len().max(1) as f64) as f32)
}

pub(crate) fn joined(parts: &[(&str, &ParamStore)]) -> ParamStore {
    let mut all = ParamStore::new(parts.first().map_or(0, |p| p.1.seed()));
    for (prefix, store) in parts {
        all.extend_prefixed(prefix, store);
    }
    all
}

/// Step index below which the adversarial weight is zero.
pub(crate) fn warmup_steps(total: usize, frac: f32) -> usize {
    (total as f32 * frac).ceil() as usize
}

/// Alternating generator/discriminator training on pooled `X₀ ∪ X₁`.
pub fn train_base_ae(
    train: &[ImagePairRecord],
    val: &[ImagePairRecord],
    model: AutoencoderModel,
    disc: Discriminator,
    phi: &PerceptualExtractor,
    cfg: &BaseAeConfig,
    seed: u64,
) -> Result<BaseAeOutcome, AutoencError> {
    if train.is_empty() {
        return Err(AutoencError::EmptyData);
    }
    let images = pooled(train)?;
    let val_images = if val.is_empty() { None } else { Some(pooled(val)?) };
    let val_l2_of = |m: &AutoencoderModel| val_images.as_ref().map_or(Ok(0.0), |v| reconstruction_l2(m, v));
    let val_l2_init = val_l2_of(&model)?;
    let n = images.batch();
    let per_epoch = batches_per_epoch(n, cfg.batch);
    let warmup = warmup_steps(per_epoch * cfg.epochs, cfg.adv_warmup);
    let adam = AdamConfig::with_lr(cfg.lr);

    let arch = model.arch.clone();
    let mut gen = joined(&[("enc.", &model.encoder), ("dec.", &model.decoder)]);
    let mut disc = disc;
    let (mut gen_state, mut disc_state) = (AdamState::default(), AdamState::default());
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let seeds = (model.encoder.seed(), model.decoder.seed());
    let snapshot = |gen: &ParamStore, disc: &Discriminator| {
        let (mut encoder, mut decoder) = (gen.strip_prefix("enc."), gen.strip_prefix("dec."));
        encoder.set_seed(seeds.0);
        decoder.set_seed(seeds.1);
        Box::new((AutoencoderModel { arch: arch.clone(), encoder, decoder }, disc.clone()))
    };

    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, &mut epoch_rng(seed, epoch));
        let mut sums = [0.0f64; 4];
        for b in 0..per_epoch {
            let idx = &order[b * cfg.batch..((b + 1) * cfg.batch).min(n)];
            let x = images.gather(idx);
            let adv_weight = if step < warmup { 0.0 } else { 1.0 };

            let mut tape = Tape::new();
            let g = tape.bind(&gen);
            let s = tape.bind_frozen(&disc.params);
            let xv = tape.constant(x.clone());
            let enc = record_encoder(&mut tape, &g.scope("enc."), xv)?;
            let y = record_decoder(&mut tape, &g.scope("dec."), &arch, enc.z, &enc.skips)?;
            let lv = record_recon_loss(&mut tape, xv, y, phi, &disc, &s, adv_weight)?;
            let loss = AeLoss::read(&tape, &lv);
            if !loss.total.is_finite() {
                return Err(AutoencError::Diverged { epoch, step: b, last_good: snapshot(&gen, &disc) });
            }
            let grads = tape.backward_scalar(lv.total)?;
            let fake = tape.value(y).clone();
            drop(tape);
            adam_step(&mut gen, &grads, &mut gen_state, adam)?;

            let mut tape = Tape::new();
            let s = tape.bind(&disc.params);
            let (r, f) = (tape.constant(x), tape.constant(fake));
            let dl = record_disc_loss(&mut tape, &disc, &s, r, f)?;
            let dval = tape.value(dl).item();
            if !dval.is_finite() {
                return Err(AutoencError::Diverged { epoch, step: b, last_good: snapshot(&gen, &disc) });
            }
            let dgrads = tape.backward_scalar(dl)?;
            drop(tape);
            adam_step(&mut disc.params, &dgrads, &mut disc_state, adam)?;

            let w = idx.len() as f64;
            for (acc, v) in sums.iter_mut().zip([loss.l2, loss.perc, loss.adv, dval]) {
                *acc += v as f64 * w;
            }
            step += 1;
        }
        let current = snapshot(&gen, &disc).0;
        let val_l2 = val_l2_of(&current)?;
        let m = |i: usize| (sums[i] / n as f64) as f32;
        curves.push(AeEpoch { epoch: epoch + 1, l2: m(0), perc: m(1), adv: m(2), disc: m(3), val_l2 });
    }
    let model = snapshot(&gen, &disc).0;
    Ok(BaseAeOutcome { model, disc, curves, val_l2_init })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::AeArch;
    use crate::dataio::{generate, split_of, GeneratorConfig, Split};
    use crate::diagnostics::{pixel_classifier_spec, BinaryClassifier};

    fn setup(n: usize) -> (Vec<ImagePairRecord>, Vec<ImagePairRecord>, PerceptualExtractor) {
        let cfg = GeneratorConfig { n_subjects: n, image_size: 32, seed: 1, ..Default::default() };
        let data: Vec<ImagePairRecord> = generate(&cfg).unwrap().into_iter().map(|s| s.record).collect();
        let phi = PerceptualExtractor::from_classifier(&BinaryClassifier::new(pixel_classifier_spec(32), 0)).unwrap();
        (split_of(&data, Split::Train), split_of(&data, Split::Val), phi)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (train, val, phi) = setup(20);
        let arch = AeArch::narrow(8, 16);
        let model = AutoencoderModel::new(arch.clone(), 4);
        let disc = Discriminator::new(&arch, 32, 5);
        let cfg = BaseAeConfig { epochs: 0, ..Default::default() };
        let out = train_base_ae(&train, &val, model.clone(), disc.clone(), &phi, &cfg, 0).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.disc, disc);
        assert!(out.curves.is_empty());
    }

    #[test]
    fn short_run_reduces_validation_error_and_keeps_phi() {
        let (train, val, phi) = setup(60);
        let before = phi.fingerprint();
        let arch = AeArch::narrow(8, 16);
        let model = AutoencoderModel::new(arch.clone(), 4);
        let disc = Discriminator::new(&arch, 32, 5);
        let cfg = BaseAeConfig { epochs: 6, lr: 1e-3, batch: 8, adv_warmup: 0.1 };
        let out = train_base_ae(&train, &val, model, disc, &phi, &cfg, 0).unwrap();
        assert_eq!(phi.fingerprint(), before);
        let last = out.curves.last().unwrap().val_l2;
        assert!(last < out.val_l2_init, "{} -> {last}", out.val_l2_init);
    }

    #[test]
    fn warmup_covers_first_tenth() {
        assert_eq!(warmup_steps(100, 0.1), 10);
        assert_eq!(warmup_steps(7, 0.1), 1);
        assert_eq!(warmup_steps(0, 0.1), 0);
    }
}
