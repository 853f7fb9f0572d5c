use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use corrflow::batching::{image_batch, unbatch_images};
use corrflow::dataio::{generate_dataset, load_manifest, write_image, ImagePairRecord, Label};
use corrflow::diagnostics::{reports_csv, EvalMode};
use corrflow::latentflow::infer_followup;
use corrflow::tensor::ParamStore;
use corrflow_cli::checkpoint::save_checkpoint;
use corrflow_cli::harness::{ablate, sweep, SWEEP_LAMBDA2};
use corrflow_cli::{gradsuite, run_until, CliError, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "corrflow", version, about = "Longitudinal image progression in a correlated latent space")]
struct Cli {
    /// JSON pipeline config; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the pipeline seed and the data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides `outDir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Training is single-threaded; values other than 1 are
    /// accepted and ignored.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowStageArg {
    Ba,
    Fm,
    Ac,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Early,
    Followup,
    Generated,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (images and manifest) to `<out>/data`.
    GenData,
    TrainClassifiers,
    TrainBaseAe,
    TrainCorrAe,
    /// Train flow stages up to and including `--stage`.
    TrainFlow {
        #[arg(long, value_enum)]
        stage: FlowStageArg,
    },
    TrainLatentClassifier,
    /// Predict follow-up images for test nodules, or for every pair of a
    /// manifest.
    Infer {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    Evaluate {
        #[arg(long, value_enum, default_value = "all")]
        mode: ModeArg,
    },
    /// Full pipeline plus the component ablation.
    Ablate,
    /// λ₂ sweep with λ₁ = 1.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f32>>,
    },
    /// Finite-difference check of every layer and model family.
    GradCheck,
    /// Print the effective config.
    ShowConfig,
}

fn config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn infer(cfg: &PipelineConfig, manifest: Option<&PathBuf>) -> Result<(), CliError> {
    let (run, data, art) = run_until(cfg, Stage::Ac)?;
    let (model, field) = (art.corr.expect("trained"), art.ac.expect("trained"));
    let records: Vec<ImagePairRecord> = match manifest {
        Some(p) => load_manifest(p)?.iter().map(|e| e.load()).collect::<Result<_, _>>()?,
        None => data.test.into_iter().filter(|r| r.label != Label::None).collect(),
    };
    let dir = run.dir.join("infer");
    let x0 = image_batch(records.iter().map(|r| &r.x0))?;
    let (z, x) = infer_followup(&model, &field, &x0, cfg.flow.infer_steps)?;
    let mut latents = ParamStore::new(cfg.seed);
    for ((r, img), i) in records.iter().zip(unbatch_images(&x)).zip(0..) {
        write_image(&img, &dir.join(format!("{}_followup.cfni", r.pair_id)))?;
        latents.insert(r.pair_id.clone(), z.gather(&[i]));
    }
    save_checkpoint(&latents, None, &dir.join("latent.cfck"))?;
    println!("wrote {} predictions to {}", records.len(), dir.display());
    Ok(())
}

fn evaluate(cfg: &PipelineConfig, mode: ModeArg) -> Result<(), CliError> {
    let (run, _, art) = run_until(cfg, Stage::Evaluate)?;
    let modes = match mode {
        ModeArg::Early => vec![EvalMode::Early],
        ModeArg::Followup => vec![EvalMode::Followup],
        ModeArg::Generated => vec![EvalMode::Generated],
        ModeArg::All => EvalMode::ALL.to_vec(),
    };
    let reports: Vec<_> = art.reports.into_iter().filter(|r| modes.contains(&r.mode)).collect();
    let name = match mode {
        ModeArg::All => "report_all.csv".to_string(),
        _ => format!("report_{}.csv", modes[0]),
    };
    let text = reports_csv(&reports);
    let path = run.dir.join(name);
    std::fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads != 1 {
        eprintln!("note: --threads {} ignored; training runs on one thread", cli.threads);
    }
    if let Command::GradCheck = cli.command {
        let suite = gradsuite::run_suite()?;
        print!("{}", suite.table());
        println!("max relative error {:.3e} in {:.1}s", suite.max_error(), suite.seconds);
        return if suite.passed() { Ok(()) } else { Err(CliError::Missing("passing gradient check".into())) };
    }
    let cfg = config(&cli)?;
    let stage = |s| run_until(&cfg, s).map(|(run, _, art)| (run, art));
    match cli.command {
        Command::GenData => {
            let path = generate_dataset(&cfg.data, &cfg.out_dir.join("data"))?;
            println!("{}", path.display());
        }
        Command::TrainClassifiers => {
            let (_, art) = stage(Stage::Classifiers)?;
            println!("pixel ensemble val AUROC {:?}", art.metrics.pixel_val_auroc);
        }
        Command::TrainBaseAe => {
            stage(Stage::BaseAe)?;
        }
        Command::TrainCorrAe => {
            let (_, art) = stage(Stage::CorrAe)?;
            println!("val Pearson {:.4} (init {:.4})", art.metrics.val_pearson, art.metrics.val_pearson_init);
        }
        Command::TrainFlow { stage: s } => {
            let last = match s {
                FlowStageArg::Ba => Stage::Ba,
                FlowStageArg::Fm => Stage::Fm,
                FlowStageArg::Ac => Stage::Ac,
            };
            let (_, art) = stage(last)?;
            let m = &art.metrics;
            println!("endpoint error init {:.4} ba {:.4} fm {:.4} ac {:.4}", m.endpoint_init, m.endpoint_ba, m.endpoint_fm, m.endpoint_ac);
        }
        Command::TrainLatentClassifier => {
            let (_, art) = stage(Stage::LatentClassifier)?;
            println!("latent val AUROC {:?}", art.metrics.latent_val_auroc);
        }
        Command::Infer { manifest } => infer(&cfg, manifest.as_ref())?,
        Command::Evaluate { mode } => evaluate(&cfg, mode)?,
        Command::Ablate => {
            for row in ablate(&cfg)? {
                println!("{:<14} AUROC {:.4} AUPRC {:.4}", row.label, row.report.auroc.mean, row.report.auprc.mean);
            }
        }
        Command::Sweep { values } => {
            let values = values.unwrap_or_else(|| SWEEP_LAMBDA2.to_vec());
            let result = sweep(&cfg, &values)?;
            for row in &result.rows {
                println!("λ₂ {:<4} AUROC {:.4} SSIM {:.4}", row.label, row.report.auroc.mean, row.report.ssim.unwrap_or(f64::NAN));
            }
            println!("spearman {:.3}", result.spearman);
        }
        Command::ShowConfig => println!("{}", cfg.to_json()),
        Command::GradCheck => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
