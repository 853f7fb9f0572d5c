//! Ablation over the pipeline components and the λ₂ sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use corrflow::corrae::{init_from_base, CorrAEModel};
use corrflow::diagnostics::{evaluate_diagnosis, spearman, EvalMode, MetricsReport};
use corrflow::latentflow::{FlowField, FlowStage};

use crate::pipeline::{base_store, classifier_store, run_pipeline, Run, Stage};
use crate::plot::{scatter_plot, Series};
use crate::{CliError, PipelineConfig};

pub const ABLATION_CONFIGS: [&str; 4] = ["baseAE+FM+AC", "corrAE", "corrAE+FM", "corrAE+FM+AC"];
pub const SWEEP_LAMBDA2: [f32; 4] = [0.2, 0.4, 0.6, 0.8];

/// Generated-mode metrics of one ablation or sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub label: String,
    pub report: MetricsReport,
}

fn rows_csv(key: &str, rows: &[Row]) -> String {
    let mut out = format!("{key},auroc,auroc_sd,auprc,auprc_sd,ssim,latent_frechet\n");
    for r in rows {
        let m = &r.report;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.label,
            m.auroc.mean,
            m.auroc.sd,
            m.auprc.mean,
            m.auprc.sd,
            m.ssim.map_or(String::new(), |v| v.to_string()),
            m.latent_frechet.map_or(String::new(), |v| v.to_string())
        )
        .unwrap();
    }
    out
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Runs the pipeline (resuming) plus the base-autoencoder variant, and
/// writes `ablation.csv` in the run directory.
pub fn ablate(cfg: &PipelineConfig) -> Result<Vec<Row>, CliError> {
    let (mut run, data, art) = run_pipeline(cfg)?;
    let missing = |what: &str| CliError::Missing(what.to_string());
    let ens = art.ensemble.ok_or_else(|| missing("pixel ensemble"))?;
    let base = art.base.ok_or_else(|| missing("base autoencoder"))?;
    let corr = art.corr.ok_or_else(|| missing("correlational autoencoder"))?;
    let fm = art.fm.ok_or_else(|| missing("flow-matched field"))?;
    let ac = art.ac.ok_or_else(|| missing("fine-tuned field"))?;
    let latent = art.latent.ok_or_else(|| missing("latent classifiers"))?;

    let warm = init_from_base(&base.0, &base.1, cfg.corr_ae.lambdas)?;
    let stores = [warm.e0(), warm.e1(), warm.d0(), warm.d1()].map(|s| s.clone());
    let base_model = CorrAEModel::from_parts(warm.arch().clone(), stores, warm.disc().clone(), cfg.corr_ae.lambdas, true)?;
    let prefix = "ablation_base_";
    let b_ba = run.flow(prefix, FlowStage::Ba, &data, &base_model, &ens, None)?;
    let b_fm = run.flow(prefix, FlowStage::Fm, &data, &base_model, &ens, Some(&b_ba))?;
    let b_ac = run.flow(prefix, FlowStage::Ac, &data, &base_model, &ens, Some(&b_fm))?;
    let b_latent = run.latent_classifiers(prefix, &data, &base_model)?;

    let zero = FlowField::zeros(cfg.model.flow.clone());
    let fp = run.fingerprint_hex();
    let variants: [(&CorrAEModel, &FlowField, &[_]); 4] =
        [(&base_model, &b_ac, &b_latent), (&corr, &zero, &latent), (&corr, &fm, &latent), (&corr, &ac, &latent)];
    let mut rows = Vec::new();
    for (label, (model, field, clfs)) in ABLATION_CONFIGS.iter().zip(variants) {
        let comps = run.components(model, Some(field), clfs, &ens, &fp);
        let report = evaluate_diagnosis(&data.test, &comps, EvalMode::Generated)
            .map_err(|e| CliError::Stage { stage: format!("ablation {label}"), source: Box::new(e.into()) })?;
        rows.push(Row { label: label.to_string(), report });
    }
    write(&run.dir.join("ablation.csv"), &rows_csv("config", &rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<Row>,
    pub lambda2: Vec<f32>,
    /// Rank correlation of λ₂ with generated-mode AUROC.
    pub spearman: f64,
}

/// Config of one sweep point: λ₁ = 1, λ₂ = `v`, under `parent/sweep/`.
pub fn sweep_config(parent: &PipelineConfig, v: f32) -> PipelineConfig {
    let mut cfg = parent.clone();
    cfg.corr_ae.lambdas.sr = 1.0;
    cfg.corr_ae.lambdas.cr = v;
    cfg.out_dir = parent.out_dir.join("sweep").join(format!("lambda2_{v}"));
    cfg
}

/// Trains the corr-AE and flow stages for each λ₂, reusing the parent's
/// classifier and base-AE checkpoints; writes `sweep.csv` and `sweep.svg`.
pub fn sweep(cfg: &PipelineConfig, values: &[f32]) -> Result<SweepResult, CliError> {
    let (_, _, parent) = crate::pipeline::run_until(cfg, Stage::BaseAe)?;
    let ens = parent.ensemble.ok_or_else(|| CliError::Missing("pixel ensemble".into()))?;
    let base = parent.base.ok_or_else(|| CliError::Missing("base autoencoder".into()))?;
    let mut rows = Vec::new();
    for &v in values {
        let child = sweep_config(cfg, v);
        let run = Run::open(&child)?;
        run.adopt(Stage::Classifiers.name(), &classifier_store(&ens))?;
        run.adopt(Stage::BaseAe.name(), &base_store(&base))?;
        drop(run);
        let (_, _, art) = run_pipeline(&child)?;
        let report = art
            .reports
            .into_iter()
            .find(|r| r.mode == EvalMode::Generated)
            .ok_or_else(|| CliError::Missing("generated-mode report".into()))?;
        rows.push(Row { label: v.to_string(), report });
    }
    let x: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.report.auroc.mean).collect();
    let rho = spearman(&x, &y)?;
    let dir = cfg.out_dir.join("sweep");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut csv = rows_csv("lambda2", &rows);
    writeln!(csv, "# spearman(lambda2, auroc) = {rho}").unwrap();
    write(&dir.join("sweep.csv"), &csv)?;
    let points: Vec<Series> = rows
        .iter()
        .map(|r| Series::new(&format!("λ₂ = {}", r.label), [(r.report.ssim.unwrap_or(f64::NAN), r.report.auroc.mean)]))
        .collect();
    write(&dir.join("sweep.svg"), &scatter_plot("AUROC against SSIM across λ₂", "SSIM", "AUROC", &points))?;
    Ok(SweepResult { rows, lambda2: values.to_vec(), spearman: rho })
}
