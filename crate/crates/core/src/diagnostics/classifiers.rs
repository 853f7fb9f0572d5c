use serde::{Deserialize, Serialize};

use super::{auroc, DiagnosticsError};
use crate::batching::{batches_per_epoch, epoch_order, epoch_rng, image_batch};
use crate::dataio::{ImagePairRecord, Label};
use crate::tensor::{adam_step, AdamConfig, AdamState, Array, GraphSpec, LayerSpec, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 3, lr: 1e-3, batch: 64 }
    }
}

/// Chunk size for inference-only passes.
const EVAL_CHUNK: usize = 128;

/// Three stride-2 conv blocks (16/32/64) and a dense logit head.
pub fn pixel_classifier_spec(image_size: usize) -> GraphSpec {
    let s = image_size / 8;
    GraphSpec::new(
        &[image_size, image_size, 1],
        vec![
            LayerSpec::conv("c1", 1, 16, 3, 2, 1),
            LayerSpec::LeakyRelu,
            LayerSpec::conv("c2", 16, 32, 3, 2, 1),
            LayerSpec::LeakyRelu,
            LayerSpec::conv("c3", 32, 64, 3, 2, 1),
            LayerSpec::LeakyRelu,
            LayerSpec::Flatten,
            LayerSpec::dense("head", 64 * s * s, 1),
        ],
    )
}

/// Flattened latent, one hidden layer of 256 units, logit output.
pub fn latent_classifier_spec(latent_shape: &[usize]) -> GraphSpec {
    let d: usize = latent_shape.iter().product();
    GraphSpec::new(
        latent_shape,
        vec![
            LayerSpec::Flatten,
            LayerSpec::dense("hidden", d, 256),
            LayerSpec::LeakyRelu,
            LayerSpec::dense("out", 256, 1),
        ],
    )
}

/// A binary classifier whose graph ends in a logit; scores are sigmoid
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryClassifier {
    spec: GraphSpec,
    params: ParamStore,
}

impl BinaryClassifier {
    pub fn new(spec: GraphSpec, seed: u64) -> Self {
        let params = spec.init_params(seed);
        Self { spec, params }
    }

    pub fn from_params(spec: GraphSpec, params: ParamStore) -> Result<Self, DiagnosticsError> {
        let want = spec.init_params(0);
        for (name, a) in want.iter() {
            let got = params.require(name)?;
            if got.shape() != a.shape() {
                return Err(DiagnosticsError::Architecture(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.params.seed()
    }

    /// Records logits for a batched input with frozen weights, so that
    /// gradients reach only the input.
    pub fn record_logits(&self, tape: &mut Tape, x: Var) -> Result<Var, DiagnosticsError> {
        let bound = tape.bind_frozen(&self.params);
        Ok(self.spec.record(tape, &bound, x)?)
    }

    /// Probabilities for a batched input.
    pub fn predict(&self, inputs: &Array) -> Result<Vec<f32>, DiagnosticsError> {
        let n = inputs.batch();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(inputs.gather(&idx));
            let y = self.record_logits(&mut tape, x)?;
            out.extend(tape.value(y).data().iter().map(|&l| crate::tensor::sigmoid(l)));
        }
        Ok(out)
    }

    /// Minimizes binary cross-entropy with Adam. Returns mean train loss per
    /// epoch.
    pub fn fit(
        &mut self,
        inputs: &Array,
        targets: &[f32],
        cfg: &ClassifierConfig,
        shuffle_seed: u64,
    ) -> Result<Vec<f32>, DiagnosticsError> {
        let n = inputs.batch();
        if targets.len() != n {
            return Err(DiagnosticsError::Architecture(format!("{n} inputs but {} targets", targets.len())));
        }
        let positives = targets.iter().filter(|&&t| t > 0.5).count();
        if positives == 0 || positives == n {
            return Err(DiagnosticsError::SingleClass);
        }
        let adam = AdamConfig::with_lr(cfg.lr);
        let mut state = AdamState::default();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let order = epoch_order(n, &mut epoch_rng(shuffle_seed, epoch));
            let mut total = 0.0f64;
            for b in 0..batches_per_epoch(n, cfg.batch) {
                let idx = &order[b * cfg.batch..((b + 1) * cfg.batch).min(n)];
                let t: Vec<f32> = idx.iter().map(|&i| targets[i]).collect();
                let mut tape = Tape::new();
                let bound = tape.bind(&self.params);
                let x = tape.constant(inputs.gather(idx));
                let logits = self.spec.record(&mut tape, &bound, x)?;
                let loss = tape.bce_with_logits(logits, &t)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(DiagnosticsError::Diverged { epoch, step: b });
                }
                total += value as f64 * idx.len() as f64;
                let grads = tape.backward_scalar(loss)?;
                adam_step(&mut self.params, &grads, &mut state, adam)?;
            }
            curve.push((total / n as f64) as f32);
        }
        Ok(curve)
    }
}

/// Pooled baseline and follow-up images of nodule subjects with targets.
pub fn pooled_images(records: &[ImagePairRecord]) -> Result<(Array, Vec<f32>), DiagnosticsError> {
    let nodules: Vec<&ImagePairRecord> = records.iter().filter(|r| r.label != Label::None).collect();
    if nodules.is_empty() {
        return Err(DiagnosticsError::SingleClass);
    }
    let images = image_batch(nodules.iter().map(|r| &r.x0).chain(nodules.iter().map(|r| &r.x1)))?;
    let t: Vec<f32> = nodules.iter().map(|r| r.label.target().expect("nodule")).collect();
    Ok((images, [t.clone(), t].concat()))
}

/// Follow-up images of nodule subjects with binary labels.
pub fn followup_images(records: &[ImagePairRecord]) -> Result<(Array, Vec<bool>), DiagnosticsError> {
    let nodules: Vec<&ImagePairRecord> = records.iter().filter(|r| r.label != Label::None).collect();
    if nodules.is_empty() {
        return Err(DiagnosticsError::SingleClass);
    }
    let images = image_batch(nodules.iter().map(|r| &r.x1))?;
    Ok((images, nodules.iter().map(|r| r.label == Label::Malignant).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelEnsemble {
    pub members: Vec<BinaryClassifier>,
    /// Validation AUROC of each member on real follow-ups.
    pub val_auroc: Vec<f64>,
}

impl PixelEnsemble {
    pub fn fingerprint(&self) -> String {
        let mut all = ParamStore::new(0);
        for (i, m) in self.members.iter().enumerate() {
            all.extend_prefixed(&format!("m{i}."), m.params());
        }
        all.fingerprint()
    }
}

/// Trains `m` pixel classifiers on pooled real baseline and follow-up
/// images; members differ only by seed (`seed + i`).
pub fn train_pixel_ensemble(
    train: &[ImagePairRecord],
    val: &[ImagePairRecord],
    m: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<PixelEnsemble, DiagnosticsError> {
    if m == 0 {
        return Ok(PixelEnsemble { members: Vec::new(), val_auroc: Vec::new() });
    }
    let (images, targets) = pooled_images(train)?;
    let size = images.shape()[1];
    let (val_images, val_labels) = followup_images(val)?;
    let mut members = Vec::with_capacity(m);
    let mut val_auroc = Vec::with_capacity(m);
    for i in 0..m {
        let member_seed = seed.wrapping_add(i as u64);
        let mut clf = BinaryClassifier::new(pixel_classifier_spec(size), member_seed);
        clf.fit(&images, &targets, cfg, member_seed)?;
        val_auroc.push(auroc(&clf.predict(&val_images)?, &val_labels)?);
        members.push(clf);
    }
    Ok(PixelEnsemble { members, val_auroc })
}

/// Trains the latent classifier on `[N, h, w, c]` latents and reports its
/// validation AUROC.
pub fn train_latent_classifier(
    latents: &Array,
    targets: &[f32],
    val_latents: &Array,
    val_labels: &[bool],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(BinaryClassifier, f64), DiagnosticsError> {
    let mut clf = BinaryClassifier::new(latent_classifier_spec(&latents.shape()[1..]), seed);
    clf.fit(latents, targets, cfg, seed)?;
    let val = auroc(&clf.predict(val_latents)?, val_labels)?;
    Ok((clf, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate, split_of, GeneratorConfig, Split};

    #[test]
    fn shapes_and_output_range() {
        let clf = BinaryClassifier::new(pixel_classifier_spec(32), 1);
        let p = clf.predict(&Array::full(&[3, 32, 32, 1], 0.4)).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let lat = BinaryClassifier::new(latent_classifier_spec(&[8, 8, 4]), 1);
        assert_eq!(lat.params().get("hidden.w").unwrap().shape(), &[256, 256]);
    }

    #[test]
    fn zero_epochs_leaves_init() {
        let mut clf = BinaryClassifier::new(latent_classifier_spec(&[2, 2, 1]), 5);
        let before = clf.params().clone();
        let x = Array::from_fn(&[4, 2, 2, 1], |i| i as f32);
        clf.fit(&x, &[0.0, 1.0, 0.0, 1.0], &ClassifierConfig { epochs: 0, ..Default::default() }, 0).unwrap();
        assert_eq!(clf.params(), &before);
    }

    #[test]
    fn single_class_is_rejected() {
        let mut clf = BinaryClassifier::new(latent_classifier_spec(&[2, 2, 1]), 5);
        let x = Array::zeros(&[3, 2, 2, 1]);
        let err = clf.fit(&x, &[1.0; 3], &ClassifierConfig::default(), 0).unwrap_err();
        assert!(matches!(err, DiagnosticsError::SingleClass));
    }

    #[test]
    fn empty_ensemble() {
        let e = train_pixel_ensemble(&[], &[], 0, &ClassifierConfig::default(), 0).unwrap();
        assert!(e.members.is_empty());
    }

    #[test]
    fn latent_classifier_learns_separable_data() {
        let x = Array::from_fn(&[40, 1, 1, 2], |i| if (i / 2) % 2 == 0 { -1.0 } else { 1.0 } + (i % 3) as f32 * 0.1);
        let t: Vec<f32> = (0..40).map(|i| (i % 2) as f32).collect();
        let labels: Vec<bool> = t.iter().map(|&v| v > 0.5).collect();
        let cfg = ClassifierConfig { epochs: 30, lr: 1e-2, batch: 8 };
        let (_, val) = train_latent_classifier(&x, &t, &x, &labels, &cfg, 3).unwrap();
        assert_eq!(val, 1.0);
    }

    #[test]
    fn pixel_member_separates_followups() {
        let cfg = GeneratorConfig { n_subjects: 160, image_size: 32, seed: 5, ..Default::default() };
        let data: Vec<ImagePairRecord> = generate(&cfg).unwrap().into_iter().map(|s| s.record).collect();
        let (train, val) = (split_of(&data, Split::Train), split_of(&data, Split::Test));
        let ccfg = ClassifierConfig { epochs: 15, lr: 1e-3, batch: 32 };
        let e = train_pixel_ensemble(&train, &val, 1, &ccfg, 0).unwrap();
        assert!(e.val_auroc[0] > 0.7, "{:?}", e.val_auroc);
    }
}
