use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{auprc, auroc, latent_frechet, ssim, train_latent_classifier, BinaryClassifier, ClassifierConfig, DiagnosticsError};
use crate::batching::{image_batch, unbatch_images};
use crate::corrae::{batch_pearson, CorrAEModel};
use crate::dataio::{ImagePairRecord, Label};
use crate::latentflow::{infer_followup, FlowField, LatentPairs};
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Real baseline latents `E₀(x₀)`.
    Early,
    /// Real follow-up latents `E₁(x₁)`.
    Followup,
    /// Predicted follow-ups `z̃₁` from the flow.
    Generated,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Early, EvalMode::Followup, EvalMode::Generated];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Early => "early",
            EvalMode::Followup => "followup",
            EvalMode::Generated => "generated",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Which classifiers produce the diagnosis scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    /// Latent classifiers on latents.
    #[default]
    Latent,
    /// Pixel ensemble on decoded or real images.
    Pixel,
}

/// Trained pieces needed by [`evaluate_diagnosis`].
#[derive(Clone, Copy, Debug)]
pub struct EvalComponents<'a> {
    pub model: Option<&'a CorrAEModel>,
    pub field: Option<&'a FlowField>,
    /// One latent classifier per evaluation seed.
    pub latent_classifiers: &'a [BinaryClassifier],
    pub pixel_ensemble: &'a [BinaryClassifier],
    pub scorer: Scorer,
    pub infer_steps: usize,
    pub fingerprint: &'a str,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub per_seed: Vec<SeedMetrics>,
    pub auroc: MeanSd,
    pub auprc: MeanSd,
    /// Mean `ssim(x̃₁, x₁)`; generated mode only.
    pub ssim: Option<f64>,
    /// Against real follow-up latents; generated mode only.
    pub latent_frechet: Option<f64>,
    /// Batch Pearson between `E₀(x₀)` and `E₁(x₁)` over the evaluated records.
    pub pearson: f64,
    pub fingerprint: String,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "mode,row,auroc,auroc_sd,auprc,auprc_sd,ssim,latent_frechet,pearson,fingerprint";

    /// One row per seed followed by a summary row.
    pub fn csv_rows(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut rows: Vec<String> = self
            .per_seed
            .iter()
            .map(|s| format!("{},seed{},{},,{},,,,,{}", self.mode, s.seed, s.auroc, s.auprc, self.fingerprint))
            .collect();
        rows.push(format!(
            "{},summary,{},{},{},{},{},{},{},{}",
            self.mode,
            self.auroc.mean,
            self.auroc.sd,
            self.auprc.mean,
            self.auprc.sd,
            opt(self.ssim),
            opt(self.latent_frechet),
            self.pearson,
            self.fingerprint
        ));
        rows
    }
}

/// Header plus all rows of `reports`.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(MetricsReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        for row in r.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

fn nodules(records: &[ImagePairRecord]) -> Vec<ImagePairRecord> {
    records.iter().filter(|r| r.label != Label::None).cloned().collect()
}

/// Pooled real latents `E₀(x₀) ∪ E₁(x₁)` of nodule records with targets.
pub fn latent_training_set(model: &CorrAEModel, records: &[ImagePairRecord]) -> Result<(Array, Vec<f32>), DiagnosticsError> {
    let pairs = encode(model, &nodules(records))?;
    let latents = Array::stack(&[pairs.z0, pairs.z1])?;
    let mut shape = latents.shape()[1..].to_vec();
    shape[0] *= 2;
    let t: Vec<f32> = pairs.labels.iter().map(|l| l.target().expect("nodule")).collect();
    Ok((latents.reshape(&shape)?, [t.clone(), t].concat()))
}

/// Trains one latent classifier per seed on pooled real latents of `train`;
/// returns each with its AUROC on the real follow-up latents of `val`.
pub fn train_latent_classifiers(
    model: &CorrAEModel,
    train: &[ImagePairRecord],
    val: &[ImagePairRecord],
    cfg: &ClassifierConfig,
    seeds: &[u64],
) -> Result<Vec<(BinaryClassifier, f64)>, DiagnosticsError> {
    let (latents, targets) = latent_training_set(model, train)?;
    let val_pairs = encode(model, &nodules(val))?;
    let val_labels: Vec<bool> = val_pairs.labels.iter().map(|&l| l == Label::Malignant).collect();
    seeds
        .iter()
        .map(|&s| train_latent_classifier(&latents, &targets, &val_pairs.z1, &val_labels, cfg, s))
        .collect()
}

fn encode(model: &CorrAEModel, records: &[ImagePairRecord]) -> Result<LatentPairs, DiagnosticsError> {
    LatentPairs::encode(model, records).map_err(DiagnosticsError::from)
}

fn missing(what: &str) -> DiagnosticsError {
    DiagnosticsError::MissingComponent(what.to_string())
}

/// Scores the nodule records of `records` in the given mode.
pub fn evaluate_diagnosis(
    records: &[ImagePairRecord],
    components: &EvalComponents<'_>,
    mode: EvalMode,
) -> Result<MetricsReport, DiagnosticsError> {
    let model = components.model.ok_or_else(|| missing("correlational autoencoder"))?;
    let classifiers = match components.scorer {
        Scorer::Latent => components.latent_classifiers,
        Scorer::Pixel => components.pixel_ensemble,
    };
    if classifiers.is_empty() {
        return Err(missing(match components.scorer {
            Scorer::Latent => "latent classifiers",
            Scorer::Pixel => "pixel ensemble",
        }));
    }
    let field = match mode {
        EvalMode::Generated => Some(components.field.ok_or_else(|| missing("flow field"))?),
        _ => None,
    };
    let records = nodules(records);
    let pairs = encode(model, &records)?;
    let labels: Vec<bool> = pairs.labels.iter().map(|&l| l == Label::Malignant).collect();
    let pearson = batch_pearson(&pairs.z0, &pairs.z1)? as f64;

    let (mut ssim_mean, mut frechet) = (None, None);
    let inputs = match (mode, components.scorer) {
        (EvalMode::Early, Scorer::Latent) => pairs.z0.clone(),
        (EvalMode::Followup, Scorer::Latent) => pairs.z1.clone(),
        (EvalMode::Early, Scorer::Pixel) => image_batch(records.iter().map(|r| &r.x0))?,
        (EvalMode::Followup, Scorer::Pixel) => image_batch(records.iter().map(|r| &r.x1))?,
        (EvalMode::Generated, scorer) => {
            let x0 = image_batch(records.iter().map(|r| &r.x0))?;
            let (z, x) = infer_followup(model, field.expect("checked"), &x0, components.infer_steps)?;
            let generated = unbatch_images(&x);
            let mut total = 0.0;
            for (g, r) in generated.iter().zip(&records) {
                total += ssim(g, &r.x1)?;
            }
            ssim_mean = Some(total / records.len().max(1) as f64);
            frechet = Some(latent_frechet(&items(&pairs.z1), &items(&z))?);
            match scorer {
                Scorer::Latent => z,
                Scorer::Pixel => x,
            }
        }
    };

    let mut per_seed = Vec::with_capacity(classifiers.len());
    for clf in classifiers {
        let scores = clf.predict(&inputs)?;
        per_seed.push(SeedMetrics { seed: clf.seed(), auroc: auroc(&scores, &labels)?, auprc: auprc(&scores, &labels)? });
    }
    let col = |f: fn(&SeedMetrics) -> f64| MeanSd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsReport {
        mode,
        auroc: col(|s| s.auroc),
        auprc: col(|s| s.auprc),
        per_seed,
        ssim: ssim_mean,
        latent_frechet: frechet,
        pearson,
        fingerprint: components.fingerprint.to_string(),
    })
}

fn items(batch: &Array) -> Vec<Array> {
    (0..batch.batch()).map(|i| batch.item_at(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::{AeArch, AutoencoderModel, Discriminator};
    use crate::corrae::{init_from_base, Lambdas};
    use crate::dataio::{generate, GeneratorConfig};
    use crate::latentflow::FlowArch;
    use crate::tensor::{GraphSpec, LayerSpec};

    fn setup() -> (CorrAEModel, Vec<ImagePairRecord>) {
        let arch = AeArch::narrow(8, 16);
        let base = AutoencoderModel::new(arch.clone(), 1);
        let model = init_from_base(&base, &Discriminator::new(&arch, 32, 2), Lambdas::default()).unwrap();
        let cfg = GeneratorConfig { n_subjects: 60, image_size: 32, seed: 4, ..Default::default() };
        (model, generate(&cfg).unwrap().into_iter().map(|s| s.record).collect())
    }

    fn components<'a>(model: &'a CorrAEModel, clfs: &'a [BinaryClassifier], field: Option<&'a FlowField>) -> EvalComponents<'a> {
        EvalComponents {
            model: Some(model),
            field,
            latent_classifiers: clfs,
            pixel_ensemble: &[],
            scorer: Scorer::Latent,
            infer_steps: 10,
            fingerprint: "abc",
        }
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.sd), (2.0, 1.0));
        assert_eq!(MeanSd::of(&[0.5]).sd, 0.0);
    }

    #[test]
    fn missing_components_are_named() {
        let (model, records) = setup();
        let c = EvalComponents { model: None, ..components(&model, &[], None) };
        let err = evaluate_diagnosis(&records, &c, EvalMode::Early).unwrap_err();
        assert!(err.to_string().contains("correlational autoencoder"), "{err}");
        let err = evaluate_diagnosis(&records, &components(&model, &[], None), EvalMode::Early).unwrap_err();
        assert!(err.to_string().contains("latent classifiers"), "{err}");
        let clf = train_latent_classifiers(&model, &records, &records, &ClassifierConfig { epochs: 0, ..Default::default() }, &[0])
            .unwrap()
            .into_iter()
            .map(|c| c.0)
            .collect::<Vec<_>>();
        let err = evaluate_diagnosis(&records, &components(&model, &clf, None), EvalMode::Generated).unwrap_err();
        assert!(err.to_string().contains("flow field"), "{err}");
    }

    #[test]
    fn oracle_classifier_is_perfect_on_followup() {
        let (model, mut records) = setup();
        for r in records.iter_mut() {
            r.x1 = Array::full(r.x1.shape(), if r.label == Label::Malignant { 0.9 } else { 0.1 });
        }
        let pairs = LatentPairs::encode(&model, &nodules(&records)).unwrap();
        let shape = pairs.z1.shape()[1..].to_vec();
        let d: usize = shape.iter().product();
        let class_latent = |l: Label| pairs.z1.item_at(pairs.labels.iter().position(|&x| x == l).unwrap());
        let (zm, zb) = (class_latent(Label::Malignant), class_latent(Label::Benign));
        let w = zm.zip_map(&zb, |a, b| a - b).unwrap().reshape(&[d, 1]).unwrap();
        let spec = GraphSpec::new(&shape, vec![LayerSpec::Flatten, LayerSpec::dense("out", d, 1)]);
        let mut params = spec.init_params(0);
        params.insert("out.w", w);
        let oracle = BinaryClassifier::from_params(spec, params).unwrap();
        let report = evaluate_diagnosis(&records, &components(&model, &[oracle], None), EvalMode::Followup).unwrap();
        assert_eq!(report.auroc.mean, 1.0);
        assert_eq!(report.auprc.mean, 1.0);
        assert!(report.ssim.is_none() && report.latent_frechet.is_none());
    }

    #[test]
    fn generated_mode_reports_fidelity() {
        let (model, records) = setup();
        let cfg = ClassifierConfig { epochs: 2, ..Default::default() };
        let clfs: Vec<BinaryClassifier> =
            train_latent_classifiers(&model, &records, &records, &cfg, &[0, 1]).unwrap().into_iter().map(|c| c.0).collect();
        let field = FlowField::zeros(FlowArch::narrow(8));
        let gen = evaluate_diagnosis(&records, &components(&model, &clfs, Some(&field)), EvalMode::Generated).unwrap();
        let early = evaluate_diagnosis(&records, &components(&model, &clfs, None), EvalMode::Early).unwrap();
        // A zero field keeps z̃₁ = E₀(x₀), so latent scores coincide.
        assert_eq!(gen.per_seed, early.per_seed);
        assert_eq!(gen.latent_frechet.map(|v| v >= 0.0), Some(true));
        assert!(gen.ssim.unwrap() > -1.0 && gen.ssim.unwrap() <= 1.0);
        assert_eq!(gen.per_seed.len(), 2);
        let csv = reports_csv(&[early, gen]);
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
        assert!(csv.lines().nth(6).unwrap().starts_with("generated,summary,"));
    }

    #[test]
    fn pixel_scorer_uses_images() {
        let (model, records) = setup();
        let member = BinaryClassifier::new(super::super::pixel_classifier_spec(32), 3);
        let c = EvalComponents { scorer: Scorer::Pixel, pixel_ensemble: std::slice::from_ref(&member), ..components(&model, &[], None) };
        let report = evaluate_diagnosis(&records, &c, EvalMode::Followup).unwrap();
        let (x1, labels) = super::super::followup_images(&records).unwrap();
        assert_eq!(report.auroc.mean, auroc(&member.predict(&x1).unwrap(), &labels).unwrap());
    }

    #[test]
    fn modes_parse() {
        for m in EvalMode::ALL {
            assert_eq!(m.as_str().parse::<EvalMode>().unwrap(), m);
        }
        assert!("later".parse::<EvalMode>().is_err());
    }
}
