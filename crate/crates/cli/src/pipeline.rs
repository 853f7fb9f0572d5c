use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use corrflow::autoenc::{train_base_ae, AeEpoch, AutoencoderModel, Discriminator, PerceptualExtractor};
use corrflow::corrae::{init_from_base, train_corr_ae, validation_pearson, CorrAEModel, CorrEpoch};
use corrflow::dataio::{generate, split_of, ImagePairRecord, Label, Split};
use corrflow::diagnostics::{
    auroc, evaluate_diagnosis, followup_images, latent_classifier_spec, pixel_classifier_spec, reports_csv,
    train_latent_classifiers, train_pixel_ensemble, BinaryClassifier, EvalComponents, EvalMode, MetricsReport,
    PixelEnsemble,
};
use corrflow::latentflow::{
    ba_loss, endpoint_error, finetune_ac, train_ba, train_fm, FlowEpoch, FlowField, FlowStage, LatentPairs,
};
use corrflow::tensor::ParamStore;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{hex, PipelineConfig};
use crate::plot::{line_plot, Series};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Classifiers,
    BaseAe,
    CorrAe,
    Ba,
    Fm,
    Ac,
    LatentClassifier,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Classifiers,
        Stage::BaseAe,
        Stage::CorrAe,
        Stage::Ba,
        Stage::Fm,
        Stage::Ac,
        Stage::LatentClassifier,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Classifiers => "classifiers",
            Stage::BaseAe => "base_ae",
            Stage::CorrAe => "corr_ae",
            Stage::Ba => "flow_ba",
            Stage::Fm => "flow_fm",
            Stage::Ac => "flow_ac",
            Stage::LatentClassifier => "latent_classifier",
            Stage::Evaluate => "evaluate",
        }
    }

    fn flow(stage: FlowStage) -> Stage {
        match stage {
            FlowStage::Ba => Stage::Ba,
            FlowStage::Fm => Stage::Fm,
            FlowStage::Ac => Stage::Ac,
        }
    }
}

/// Train/val/test splits of the synthetic set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ImagePairRecord>,
    pub val: Vec<ImagePairRecord>,
    pub test: Vec<ImagePairRecord>,
}

impl Dataset {
    pub fn generate(cfg: &PipelineConfig) -> Result<Self, CliError> {
        let all: Vec<ImagePairRecord> = generate(&cfg.data)?.into_iter().map(|s| s.record).collect();
        Ok(Self { train: split_of(&all, Split::Train), val: split_of(&all, Split::Val), test: split_of(&all, Split::Test) })
    }
}

fn nodules(records: &[ImagePairRecord]) -> Vec<ImagePairRecord> {
    records.iter().filter(|r| r.label != Label::None).cloned().collect()
}

fn background(records: &[ImagePairRecord]) -> Vec<ImagePairRecord> {
    records.iter().filter(|r| r.label == Label::None).cloned().collect()
}

/// Validation statistics of each trained stage, recomputed from the models
/// so they are identical for fresh and resumed runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageMetrics {
    pub pixel_val_auroc: Vec<f64>,
    pub val_pearson_init: f64,
    pub val_pearson: f64,
    pub ba_val_loss_init: f64,
    pub ba_val_loss: f64,
    /// Endpoint error on validation nodule pairs after each flow stage.
    pub endpoint_init: f64,
    pub endpoint_ba: f64,
    pub endpoint_fm: f64,
    pub endpoint_ac: f64,
    pub latent_val_auroc: Vec<f64>,
}

impl StageMetrics {
    pub fn csv(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        let mut out = String::from("metric,value\n");
        let rows: [(&str, String); 10] = [
            ("pixel_val_auroc", list(&self.pixel_val_auroc)),
            ("val_pearson_init", self.val_pearson_init.to_string()),
            ("val_pearson", self.val_pearson.to_string()),
            ("ba_val_loss_init", self.ba_val_loss_init.to_string()),
            ("ba_val_loss", self.ba_val_loss.to_string()),
            ("endpoint_init", self.endpoint_init.to_string()),
            ("endpoint_ba", self.endpoint_ba.to_string()),
            ("endpoint_fm", self.endpoint_fm.to_string()),
            ("endpoint_ac", self.endpoint_ac.to_string()),
            ("latent_val_auroc", list(&self.latent_val_auroc)),
        ];
        for (k, v) in rows {
            writeln!(out, "{k},{v}").unwrap();
        }
        out
    }
}

/// Everything a run produced up to its last stage.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub ensemble: Option<PixelEnsemble>,
    pub base: Option<(AutoencoderModel, Discriminator)>,
    pub corr: Option<CorrAEModel>,
    pub ba: Option<FlowField>,
    pub fm: Option<FlowField>,
    pub ac: Option<FlowField>,
    pub latent: Option<Vec<BinaryClassifier>>,
    pub reports: Vec<MetricsReport>,
    pub metrics: StageMetrics,
}

/// A run directory bound to one configuration.
#[derive(Debug)]
pub struct Run {
    pub cfg: PipelineConfig,
    pub dir: PathBuf,
    fingerprint: [u8; 32],
    timings: Vec<(String, f64)>,
}

const CONFIG_FILE: &str = "config.json";

impl Run {
    /// Creates `cfg.out_dir` or reopens it for resuming. A directory written
    /// by a different configuration is rejected.
    pub fn open(cfg: &PipelineConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let path = dir.join(CONFIG_FILE);
        let fingerprint = cfg.fingerprint();
        if path.exists() {
            let previous = PipelineConfig::load(&path)?;
            if previous.fingerprint() != fingerprint {
                return Err(CliError::ResumeMismatch {
                    dir: dir.display().to_string(),
                    expected: previous.fingerprint_hex(),
                    found: cfg.fingerprint_hex(),
                });
            }
        } else {
            fs::write(&path, cfg.to_json()).map_err(|e| CliError::io(&path, e))?;
        }
        Ok(Self { cfg: cfg.clone(), dir, fingerprint, timings: Vec::new() })
    }

    pub fn fingerprint_hex(&self) -> String {
        hex(&self.fingerprint)
    }

    fn seed(&self, tag: u64) -> u64 {
        self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(tag)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.cfck"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    fn write(&self, file: &str, text: &str) -> Result<(), CliError> {
        let path = self.dir.join(file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    fn load_store(&self, name: &str) -> Result<ParamStore, CliError> {
        let path = self.path(name);
        let ck = load_checkpoint(&path)?;
        if ck.fingerprint != Some(self.fingerprint) {
            return Err(CliError::StaleCheckpoint {
                path: path.display().to_string(),
                found: ck.fingerprint.map_or("none".into(), |f| hex(&f)),
                expected: self.fingerprint_hex(),
            });
        }
        Ok(ck.store)
    }

    fn save_store(&self, name: &str, store: &ParamStore) -> Result<(), CliError> {
        Ok(save_checkpoint(store, Some(&self.fingerprint), &self.path(name))?)
    }

    /// Loads stage `name` if its checkpoint exists; otherwise trains it,
    /// saves the checkpoint and writes the curve files `train` returns.
    fn cached<T>(
        &mut self,
        name: &str,
        decode: impl FnOnce(ParamStore) -> Result<T, CliError>,
        encode: impl FnOnce(&T) -> ParamStore,
        train: impl FnOnce() -> Result<(T, Vec<(String, String)>), CliError>,
    ) -> Result<T, CliError> {
        let wrap = |e: CliError| CliError::Stage { stage: name.to_string(), source: Box::new(e) };
        if self.has(name) {
            return self.load_store(name).and_then(decode).map_err(wrap);
        }
        let start = Instant::now();
        let (value, files) = train().map_err(wrap)?;
        self.timings.push((name.to_string(), start.elapsed().as_secs_f64()));
        self.save_store(name, &encode(&value)).map_err(wrap)?;
        for (file, text) in files {
            self.write(&file, &text).map_err(wrap)?;
        }
        Ok(value)
    }

    /// Writes an adopted stage checkpoint unless one already exists.
    pub(crate) fn adopt(&self, name: &str, store: &ParamStore) -> Result<(), CliError> {
        if !self.has(name) {
            self.save_store(name, store)?;
        }
        Ok(())
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("stage,seconds\n");
        for (s, t) in &self.timings {
            writeln!(out, "{s},{t:.2}").unwrap();
        }
        out
    }

    pub fn classifiers(&mut self, data: &Dataset) -> Result<PixelEnsemble, CliError> {
        let (m, seed) = (self.cfg.classifiers.m, self.seed(1));
        let size = self.cfg.data.image_size;
        let ccfg = self.cfg.classifiers.classifier();
        let (train, val) = (&data.train, &data.val);
        self.cached(
            Stage::Classifiers.name(),
            |store| {
                let members = (0..m)
                    .map(|i| {
                        let mut p = store.strip_prefix(&format!("m{i}."));
                        p.set_seed(seed.wrapping_add(i as u64));
                        Ok(BinaryClassifier::from_params(pixel_classifier_spec(size), p)?)
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                let (x1, labels) = followup_images(val)?;
                let val_auroc = members
                    .iter()
                    .map(|c| Ok(auroc(&c.predict(&x1)?, &labels)?))
                    .collect::<Result<Vec<f64>, CliError>>()?;
                Ok(PixelEnsemble { members, val_auroc })
            },
            ensemble_store,
            || Ok((train_pixel_ensemble(train, val, m, &ccfg, seed)?, Vec::new())),
        )
    }

    pub fn base_ae(&mut self, data: &Dataset, ens: &PixelEnsemble) -> Result<(AutoencoderModel, Discriminator), CliError> {
        let arch = self.cfg.model.ae.clone();
        let size = self.cfg.data.image_size;
        let (bcfg, seed) = (self.cfg.base_ae.clone(), self.seed(2));
        self.cached(
            Stage::BaseAe.name(),
            |store| {
                let model = AutoencoderModel::from_params(arch.clone(), strip(&store, "enc.", seed), strip(&store, "dec.", seed + 1))?;
                let disc = Discriminator { spec: arch.discriminator_spec(size), params: strip(&store, "disc.", seed + 2) };
                check_disc(&disc)?;
                Ok((model, disc))
            },
            |(m, d)| joined(&[("enc.", &m.encoder), ("dec.", &m.decoder), ("disc.", &d.params)]),
            || {
                let phi = PerceptualExtractor::from_classifier(first_member(ens)?)?;
                let model = AutoencoderModel::new(arch.clone(), seed);
                let disc = Discriminator::new(&arch, size, seed + 2);
                let out = train_base_ae(&data.train, &data.val, model, disc, &phi, &bcfg, seed)?;
                let curves = csv_of(AeEpoch::CSV_HEADER, out.curves.iter().map(|c| c.csv_row()));
                let svg = line_plot(
                    "Base autoencoder",
                    "epoch",
                    "loss",
                    &[
                        Series::new("train L2", out.curves.iter().map(|c| (c.epoch as f64, c.l2 as f64))),
                        Series::new("val L2", out.curves.iter().map(|c| (c.epoch as f64, c.val_l2 as f64))),
                        Series::new("perceptual", out.curves.iter().map(|c| (c.epoch as f64, c.perc as f64))),
                    ],
                );
                Ok(((out.model, out.disc), vec![("base_ae.csv".into(), curves), ("base_ae.svg".into(), svg)]))
            },
        )
    }

    pub fn corr_ae(
        &mut self,
        data: &Dataset,
        ens: &PixelEnsemble,
        base: &(AutoencoderModel, Discriminator),
    ) -> Result<CorrAEModel, CliError> {
        let arch = self.cfg.model.ae.clone();
        let ccfg = self.cfg.corr_ae.clone();
        let seed = self.seed(3);
        self.cached(
            Stage::CorrAe.name(),
            |store| {
                let stores = ["e0.", "e1.", "d0.", "d1."].map(|p| store.strip_prefix(p));
                let disc = Discriminator { spec: base.1.spec.clone(), params: store.strip_prefix("disc.") };
                check_disc(&disc)?;
                Ok(CorrAEModel::from_parts(arch.clone(), stores, disc, ccfg.lambdas, true)?)
            },
            corr_store,
            || {
                let phi = PerceptualExtractor::from_classifier(first_member(ens)?)?;
                let warm = init_from_base(&base.0, &base.1, ccfg.lambdas)?;
                let out = train_corr_ae(&data.train, &data.val, warm, &phi, &ccfg, seed)?;
                let curves = csv_of(CorrEpoch::CSV_HEADER, out.curves.iter().map(|c| c.csv_row()));
                let svg = line_plot(
                    "Correlational autoencoder",
                    "epoch",
                    "value",
                    &[
                        Series::new("self-reconstruction", out.curves.iter().map(|c| (c.epoch as f64, c.sr as f64))),
                        Series::new("cross-reconstruction", out.curves.iter().map(|c| (c.epoch as f64, c.cr as f64))),
                        Series::new("val Pearson", out.curves.iter().map(|c| (c.epoch as f64, c.val_pearson as f64))),
                    ],
                );
                Ok((out.model, vec![("corr_ae.csv".into(), curves), ("corr_ae.svg".into(), svg)]))
            },
        )
    }

    /// Trains flow `stage` starting from `from` (a fresh field before BA).
    /// `prefix` namespaces the checkpoint for ablation variants.
    pub fn flow(
        &mut self,
        prefix: &str,
        stage: FlowStage,
        data: &Dataset,
        model: &CorrAEModel,
        ens: &PixelEnsemble,
        from: Option<&FlowField>,
    ) -> Result<FlowField, CliError> {
        let name = format!("{prefix}{}", Stage::flow(stage).name());
        let fcfg = self.cfg.flow.stage(stage);
        let arch = self.cfg.model.flow.clone();
        let seed = self.seed(4 + stage as u64);
        let init_seed = self.seed(10);
        let curve_file = format!("{name}.csv");
        self.cached(
            &name,
            |store| {
                let template = FlowField::new(arch.clone(), 0);
                check_like(&store, &template.params, "flow field")?;
                let mut params = store;
                params.set_seed(template.params.seed());
                Ok(FlowField { arch: arch.clone(), params })
            },
            |f| f.params.clone(),
            || {
                let curves: Vec<FlowEpoch>;
                let field = match stage {
                    FlowStage::Ba => {
                        let start = from.cloned().unwrap_or_else(|| FlowField::new(arch.clone(), init_seed));
                        let train = LatentPairs::encode(model, &background(&data.train))?;
                        let val = LatentPairs::encode(model, &background(&data.val))?;
                        let out = train_ba(start, &train, &val, &fcfg, seed)?;
                        curves = out.curves;
                        out.field
                    }
                    FlowStage::Fm => {
                        let start = from.ok_or_else(|| CliError::Missing("background-aligned field".into()))?.clone();
                        let train = LatentPairs::encode(model, &nodules(&data.train))?;
                        let val = LatentPairs::encode(model, &nodules(&data.val))?;
                        let out = train_fm(start, &train, &val, &fcfg, seed)?;
                        curves = out.curves;
                        out.field
                    }
                    FlowStage::Ac => {
                        let start = from.ok_or_else(|| CliError::Missing("flow-matched field".into()))?.clone();
                        let out =
                            finetune_ac(start, model, &ens.members, &nodules(&data.train), &nodules(&data.val), &fcfg, seed)?;
                        curves = out.curves;
                        out.field
                    }
                };
                Ok((field, vec![(curve_file, csv_of(FlowEpoch::CSV_HEADER, curves.iter().map(|c| c.csv_row())))]))
            },
        )
    }

    pub fn latent_classifiers(
        &mut self,
        prefix: &str,
        data: &Dataset,
        model: &CorrAEModel,
    ) -> Result<Vec<BinaryClassifier>, CliError> {
        let name = format!("{prefix}{}", Stage::LatentClassifier.name());
        let seeds: Vec<u64> = self.cfg.eval.seeds.iter().map(|&s| self.seed(100 + s)).collect();
        let lcfg = self.cfg.latent_classifier.clone();
        let size = self.cfg.data.image_size / 8;
        let latent_shape = [size, size, self.cfg.model.ae.latent_channels];
        self.cached(
            &name,
            |store| {
                seeds
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let mut p = store.strip_prefix(&format!("k{i}."));
                        p.set_seed(s);
                        Ok(BinaryClassifier::from_params(latent_classifier_spec(&latent_shape), p)?)
                    })
                    .collect()
            },
            |clfs: &Vec<BinaryClassifier>| {
                let mut all = ParamStore::new(0);
                for (i, c) in clfs.iter().enumerate() {
                    all.extend_prefixed(&format!("k{i}."), c.params());
                }
                all
            },
            || {
                let trained = train_latent_classifiers(model, &data.train, &data.val, &lcfg, &seeds)?;
                Ok((trained.into_iter().map(|(c, _)| c).collect(), Vec::new()))
            },
        )
    }

    pub fn components<'a>(
        &'a self,
        model: &'a CorrAEModel,
        field: Option<&'a FlowField>,
        latent: &'a [BinaryClassifier],
        ens: &'a PixelEnsemble,
        fingerprint: &'a str,
    ) -> EvalComponents<'a> {
        EvalComponents {
            model: Some(model),
            field,
            latent_classifiers: latent,
            pixel_ensemble: &ens.members,
            scorer: self.cfg.eval.scorer,
            infer_steps: self.cfg.flow.infer_steps,
            fingerprint,
        }
    }
}

fn strip(store: &ParamStore, prefix: &str, seed: u64) -> ParamStore {
    let mut s = store.strip_prefix(prefix);
    s.set_seed(seed);
    s
}

fn joined(parts: &[(&str, &ParamStore)]) -> ParamStore {
    let mut all = ParamStore::new(0);
    for (p, s) in parts {
        all.extend_prefixed(p, s);
    }
    all
}

fn check_like(store: &ParamStore, template: &ParamStore, what: &str) -> Result<(), CliError> {
    let same = store.len() == template.len()
        && template.iter().all(|(n, a)| store.get(n).is_some_and(|b| b.shape() == a.shape()));
    if same {
        Ok(())
    } else {
        Err(CliError::Checkpoint(crate::checkpoint::CheckpointError::Unencodable {
            name: what.to_string(),
            reason: "stored entries do not match the configured architecture",
        }))
    }
}

fn check_disc(disc: &Discriminator) -> Result<(), CliError> {
    check_like(&disc.params, &disc.spec.init_params(0), "discriminator")
}

fn first_member(ens: &PixelEnsemble) -> Result<&BinaryClassifier, CliError> {
    ens.members.first().ok_or_else(|| CliError::Missing("pixel ensemble".into()))
}

fn ensemble_store(ens: &PixelEnsemble) -> ParamStore {
    let mut all = ParamStore::new(0);
    for (i, m) in ens.members.iter().enumerate() {
        all.extend_prefixed(&format!("m{i}."), m.params());
    }
    all
}

pub(crate) fn base_store(base: &(AutoencoderModel, Discriminator)) -> ParamStore {
    joined(&[("enc.", &base.0.encoder), ("dec.", &base.0.decoder), ("disc.", &base.1.params)])
}

pub(crate) fn classifier_store(ens: &PixelEnsemble) -> ParamStore {
    ensemble_store(ens)
}

fn corr_store(m: &CorrAEModel) -> ParamStore {
    let mut all = joined(&[("e0.", m.e0()), ("e1.", m.e1()), ("d0.", m.d0()), ("d1.", m.d1()), ("disc.", &m.disc().params)]);
    all.set_seed(m.e0().seed());
    all
}

fn csv_of(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// Runs every stage up to and including `last`, resuming from any
/// checkpoints already in the run directory.
pub fn run_until(cfg: &PipelineConfig, last: Stage) -> Result<(Run, Dataset, Artifacts), CliError> {
    let mut run = Run::open(cfg)?;
    let data = Dataset::generate(cfg)?;
    let mut art = Artifacts::default();
    let dir = run.dir.clone();
    let result = drive(&mut run, &data, &mut art, last);
    run.write("timings.csv", &run.timings_csv()).ok();
    result.map_err(|e| match e {
        CliError::Stage { .. } => e,
        other => CliError::Stage { stage: "pipeline".into(), source: Box::new(other) },
    })?;
    debug_assert_eq!(run.dir, dir);
    Ok((run, data, art))
}

fn drive(run: &mut Run, data: &Dataset, art: &mut Artifacts, last: Stage) -> Result<(), CliError> {
    let ens = run.classifiers(data)?;
    art.metrics.pixel_val_auroc = ens.val_auroc.clone();
    art.ensemble = Some(ens.clone());
    if last == Stage::Classifiers {
        return Ok(());
    }
    let base = run.base_ae(data, &ens)?;
    art.base = Some(base.clone());
    if last == Stage::BaseAe {
        return Ok(());
    }
    let corr = run.corr_ae(data, &ens, &base)?;
    let warm = init_from_base(&base.0, &base.1, run.cfg.corr_ae.lambdas)?;
    art.metrics.val_pearson_init = validation_pearson(&warm, &data.val)? as f64;
    art.metrics.val_pearson = validation_pearson(&corr, &data.val)? as f64;
    art.corr = Some(corr.clone());
    if last == Stage::CorrAe {
        return Ok(());
    }

    let steps = run.cfg.flow.infer_steps;
    let val_nod = LatentPairs::encode(&corr, &nodules(&data.val))?;
    let val_bg = LatentPairs::encode(&corr, &background(&data.val))?;
    let train_steps = run.cfg.flow.train_steps;
    let fresh = FlowField::new(run.cfg.model.flow.clone(), run.seed(10));
    art.metrics.ba_val_loss_init = ba_loss(&fresh, &val_bg.z0, &val_bg.z1, train_steps)? as f64;
    art.metrics.endpoint_init = endpoint_error(&fresh, &val_nod, steps)? as f64;

    let ba = run.flow("", FlowStage::Ba, data, &corr, &ens, None)?;
    art.metrics.ba_val_loss = ba_loss(&ba, &val_bg.z0, &val_bg.z1, train_steps)? as f64;
    art.metrics.endpoint_ba = endpoint_error(&ba, &val_nod, steps)? as f64;
    art.ba = Some(ba.clone());
    if last == Stage::Ba {
        return Ok(());
    }
    let fm = run.flow("", FlowStage::Fm, data, &corr, &ens, Some(&ba))?;
    art.metrics.endpoint_fm = endpoint_error(&fm, &val_nod, steps)? as f64;
    art.fm = Some(fm.clone());
    if last == Stage::Fm {
        return Ok(());
    }
    let ac = run.flow("", FlowStage::Ac, data, &corr, &ens, Some(&fm))?;
    art.metrics.endpoint_ac = endpoint_error(&ac, &val_nod, steps)? as f64;
    art.ac = Some(ac.clone());
    if last == Stage::Ac {
        return Ok(());
    }
    let latent = run.latent_classifiers("", data, &corr)?;
    let (val_latents, val_labels) = {
        let pairs = &val_nod;
        (pairs.z1.clone(), pairs.labels.iter().map(|&l| l == Label::Malignant).collect::<Vec<_>>())
    };
    art.metrics.latent_val_auroc =
        latent.iter().map(|c| Ok(auroc(&c.predict(&val_latents)?, &val_labels)?)).collect::<Result<_, CliError>>()?;
    art.latent = Some(latent.clone());
    run.write("stages.csv", &art.metrics.csv())?;
    if last == Stage::LatentClassifier {
        return Ok(());
    }

    let fp = run.fingerprint_hex();
    let comps = run.components(&corr, Some(&ac), &latent, &ens, &fp);
    art.reports = EvalMode::ALL
        .iter()
        .map(|&m| evaluate_diagnosis(&data.test, &comps, m).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    run.write("report.csv", &reports_csv(&art.reports))?;
    Ok(())
}

/// Full pipeline; `report.csv` holds the three evaluation modes.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(Run, Dataset, Artifacts), CliError> {
    run_until(cfg, Stage::Evaluate)
}

pub fn report_path(dir: &Path) -> PathBuf {
    dir.join("report.csv")
}
