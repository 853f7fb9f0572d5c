use std::fs;
use std::path::Path;

use corrflow::autoenc::AeArch;
use corrflow::latentflow::FlowArch;
use corrflow_cli::checkpoint::{decode_checkpoint, load_checkpoint};
use corrflow_cli::{run_pipeline, run_until, CliError, PipelineConfig, Stage};

fn tiny(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.n_subjects = 100;
    cfg.data.image_size = 32;
    cfg.data.malignant_fraction = 0.4;
    cfg.model.ae = AeArch::narrow(8, 16);
    cfg.model.flow = FlowArch::narrow(8);
    cfg.classifiers.m = 2;
    cfg.classifiers.epochs = 1;
    cfg.base_ae.epochs = 1;
    cfg.corr_ae.epochs = 1;
    cfg.flow.ba_epochs = 1;
    cfg.flow.fm_epochs = 1;
    cfg.flow.ac_epochs = 1;
    cfg.flow.batch = 16;
    cfg.flow.train_steps = 4;
    cfg.flow.infer_steps = 8;
    cfg.latent_classifier.epochs = 2;
    cfg.eval.seeds = vec![0, 1];
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

const CHECKPOINTS: [&str; 7] = ["classifiers", "base_ae", "corr_ae", "flow_ba", "flow_fm", "flow_ac", "latent_classifier"];

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, art) = run_pipeline(&tiny(dir.path())).unwrap();
    for name in CHECKPOINTS {
        assert!(dir.path().join(format!("{name}.cfck")).exists(), "{name}");
    }
    for file in ["config.json", "report.csv", "stages.csv", "timings.csv", "base_ae.csv", "base_ae.svg", "corr_ae.csv", "flow_fm.csv"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let report = read(&dir.path().join("report.csv"));
    // header, then 2 seed rows and a summary per mode
    assert_eq!(report.lines().count(), 1 + 3 * 3);
    assert_eq!(art.reports.len(), 3);
    assert!(art.reports[2].ssim.is_some());
}

#[test]
fn resumed_and_repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&tiny(a.path())).unwrap();
    let first = read(&a.path().join("report.csv"));
    let stages = read(&a.path().join("stages.csv"));

    run_pipeline(&tiny(b.path())).unwrap();
    assert_eq!(read(&b.path().join("report.csv")), first);
    for name in CHECKPOINTS {
        let (x, y) = (fs::read(a.path().join(format!("{name}.cfck"))).unwrap(), fs::read(b.path().join(format!("{name}.cfck"))).unwrap());
        assert_eq!(x, y, "{name}");
    }

    // drop the later stages and resume
    for name in ["flow_fm", "flow_ac", "latent_classifier"] {
        fs::remove_file(a.path().join(format!("{name}.cfck"))).unwrap();
    }
    fs::remove_file(a.path().join("report.csv")).unwrap();
    run_pipeline(&tiny(a.path())).unwrap();
    assert_eq!(read(&a.path().join("report.csv")), first);
    assert_eq!(read(&a.path().join("stages.csv")), stages);
}

#[test]
fn checkpoints_round_trip_and_carry_the_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_until(&cfg, Stage::CorrAe).unwrap();
    for name in ["classifiers", "base_ae", "corr_ae"] {
        let path = dir.path().join(format!("{name}.cfck"));
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.fingerprint, Some(cfg.fingerprint()));
        let bytes = fs::read(&path).unwrap();
        let again = corrflow_cli::checkpoint::encode_checkpoint(&ck.store, ck.fingerprint.as_ref()).unwrap();
        assert_eq!(again, bytes);
        let mut bad = bytes.clone();
        bad[bytes.len() / 3] ^= 0x40;
        assert!(decode_checkpoint(&bad).is_err());
    }
}

#[test]
fn changed_config_cannot_resume_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_until(&cfg, Stage::Classifiers).unwrap();
    let mut other = cfg.clone();
    other.corr_ae.epochs = 2;
    let err = run_until(&other, Stage::Classifiers).unwrap_err();
    assert!(matches!(err.root(), CliError::ResumeMismatch { .. }), "{err}");
}

#[test]
fn foreign_checkpoints_are_rejected() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_until(&tiny(a.path()), Stage::Classifiers).unwrap();
    let other = tiny(b.path()).with_seed(5);
    fs::create_dir_all(b.path()).unwrap();
    fs::copy(a.path().join("classifiers.cfck"), b.path().join("classifiers.cfck")).unwrap();
    let err = run_until(&other, Stage::Classifiers).unwrap_err();
    assert!(matches!(err.root(), CliError::StaleCheckpoint { .. }), "{err}");
}

#[test]
fn corrupted_checkpoint_stops_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_until(&cfg, Stage::Classifiers).unwrap();
    let path = dir.path().join("classifiers.cfck");
    let mut bytes = fs::read(&path).unwrap();
    bytes[20] ^= 1;
    fs::write(&path, bytes).unwrap();
    let err = run_until(&cfg, Stage::Classifiers).unwrap_err();
    assert!(err.to_string().contains("classifiers"), "{err}");
    assert!(matches!(err.root(), CliError::Checkpoint(_)), "{err}");
}
