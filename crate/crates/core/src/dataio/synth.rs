use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestEntry};
use super::{write_image, DataError, ImagePairRecord, Label, Split};
use crate::tensor::Array;

/// Fraction of subjects without a nodule.
const BACKGROUND_FRACTION: f64 = 0.2;
const SPLIT_FRACTIONS: [f64; 2] = [0.6, 0.15];
const RADIUS_RANGE: (f32, f32) = (3.0, 8.0);
/// Lobes of the boundary perturbation on malignant nodules.
const LOBES: f32 = 7.0;
/// Width of the sigmoid edge of the nodule and the lung boundary, in pixels.
const NODULE_EDGE: f32 = 0.6;
const WALL_EDGE: f32 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub malignant_fraction: f64,
    pub image_size: usize,
    pub benign_growth: (f32, f32),
    pub malignant_growth: (f32, f32),
    pub noise_sigma: f32,
    pub early_signal_strength: f32,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_subjects: 2000,
            malignant_fraction: 0.2,
            image_size: 64,
            benign_growth: (0.95, 1.05),
            malignant_growth: (1.3, 1.8),
            noise_sigma: 0.02,
            early_signal_strength: 0.15,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if !(self.malignant_fraction > 0.0 && self.malignant_fraction < 1.0) {
            return bad("malignantFraction must lie in (0, 1)");
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return bad("imageSize must be a positive multiple of 8");
        }
        for (lo, hi) in [self.benign_growth, self.malignant_growth] {
            if !(lo > 0.0 && lo <= hi) {
                return bad("growth intervals must be non-empty and positive");
            }
        }
        if self.malignant_growth.0 <= self.benign_growth.1 {
            return bad("malignantGrowth must start above benignGrowth");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noiseSigma must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.early_signal_strength) {
            return bad("earlySignalStrength must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Generating parameters of one nodule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoduleTruth {
    /// Row, column.
    pub center: (f32, f32),
    pub r0: f32,
    pub r1: f32,
    pub growth: f32,
    pub contrast: f32,
    pub irregularity: f32,
    pub phase: f32,
}

impl NoduleTruth {
    /// Largest boundary distance from the center at follow-up.
    pub fn max_radius(&self) -> f32 {
        self.r0.max(self.r1) * (1.0 + self.irregularity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSubject {
    pub record: ImagePairRecord,
    pub truth: Option<NoduleTruth>,
}

/// Label and split of every subject, fixed by `cfg.seed`.
///
/// Exactly 20% of subjects are background-only and `malignantFraction` of
/// the rest malignant (both rounded); each class is split 60/15/25 so all
/// splits share the same prevalence.
pub fn subject_plan(cfg: &GeneratorConfig) -> Vec<(Label, Split)> {
    let n = cfg.n_subjects;
    let n_bg = (n as f64 * BACKGROUND_FRACTION).round() as usize;
    let n_mal = ((n - n_bg) as f64 * cfg.malignant_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| match i {
            i if i < n_bg => Label::None,
            i if i < n_bg + n_mal => Label::Malignant,
            _ => Label::Benign,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    labels.shuffle(&mut rng);

    let mut plan: Vec<(Label, Split)> = labels.iter().map(|&l| (l, Split::Test)).collect();
    for class in [Label::None, Label::Malignant, Label::Benign] {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let k = members.len() as f64;
        let n_train = (k * SPLIT_FRACTIONS[0]).round() as usize;
        let n_val = (k * SPLIT_FRACTIONS[1]).round() as usize;
        for (rank, &i) in members.iter().enumerate() {
            plan[i].1 = match rank {
                r if r < n_train => Split::Train,
                r if r < n_train + n_val => Split::Val,
                _ => Split::Test,
            };
        }
    }
    plan
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

struct Background {
    level: f32,
    waves: Vec<(f32, f32, f32, f32)>,
    lung_center: (f32, f32),
    lung_radius: f32,
    wall: f32,
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng, size: f32) -> Self {
        let level = rng.gen_range(0.15..0.3);
        let waves = (0..3)
            .map(|_| {
                let amp = rng.gen_range(0.02..0.05);
                let freq = rng.gen_range(0.5..2.0) / size;
                let dir = rng.gen_range(0.0..2.0 * PI);
                let phase = rng.gen_range(0.0..2.0 * PI);
                (amp, 2.0 * PI * freq * dir.cos(), 2.0 * PI * freq * dir.sin(), phase)
            })
            .collect();
        let off = rng.gen_range(0.1..0.19) * size;
        let dir = rng.gen_range(0.0..2.0 * PI);
        Self {
            level,
            waves,
            lung_center: (size / 2.0 + off * dir.sin(), size / 2.0 + off * dir.cos()),
            lung_radius: rng.gen_range(0.62..0.72) * size,
            wall: rng.gen_range(0.25..0.35),
        }
    }

    fn at(&self, y: f32, x: f32) -> f32 {
        let field: f32 = self.waves.iter().map(|&(a, fy, fx, p)| a * (fy * y + fx * x + p).cos()).sum();
        let d = ((y - self.lung_center.0).powi(2) + (x - self.lung_center.1).powi(2)).sqrt();
        self.level + field + self.wall * sigmoid((d - self.lung_radius) / WALL_EDGE)
    }
}

fn nodule_at(n: &NoduleTruth, radius: f32, y: f32, x: f32) -> f32 {
    let (dy, dx) = (y - n.center.0, x - n.center.1);
    let d = (dy * dy + dx * dx).sqrt();
    let theta = dy.atan2(dx);
    let boundary = radius * (1.0 + n.irregularity * (LOBES * theta + n.phase).cos());
    n.contrast * sigmoid((boundary - d) / NODULE_EDGE)
}

/// Generates one subject from its own stream (`seed ^ index`).
pub fn generate_subject(cfg: &GeneratorConfig, index: usize, label: Label, split: Split) -> SyntheticSubject {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let size = cfg.image_size;
    let s = size as f32;
    let bg = Background::sample(&mut rng, s);
    let truth = (label != Label::None).then(|| {
        let jitter = s / 8.0;
        let center = (s / 2.0 + rng.gen_range(-jitter..jitter), s / 2.0 + rng.gen_range(-jitter..jitter));
        let r0 = uniform(&mut rng, RADIUS_RANGE);
        let interval = if label == Label::Malignant { cfg.malignant_growth } else { cfg.benign_growth };
        let growth = uniform(&mut rng, interval);
        NoduleTruth {
            center,
            r0,
            r1: r0 * growth,
            growth,
            contrast: rng.gen_range(0.4..0.55),
            irregularity: if label == Label::Malignant { cfg.early_signal_strength } else { 0.0 },
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    });
    let noise = Normal::new(0.0f32, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut scan = |radius: Option<f32>| {
        Array::from_fn(&[size, size], |i| {
            let (y, x) = ((i / size) as f32 + 0.5, (i % size) as f32 + 0.5);
            let mut v = bg.at(y, x);
            if let (Some(n), Some(r)) = (&truth, radius) {
                v += nodule_at(n, r, y, x);
            }
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v + eps).clamp(0.0, 1.0)
        })
    };
    let x0 = scan(truth.map(|t| t.r0));
    let x1 = scan(truth.map(|t| t.r1));
    let subject_id = format!("S{index:05}");
    SyntheticSubject {
        record: ImagePairRecord {
            pair_id: format!("{subject_id}-T0T1"),
            subject_id,
            x0,
            x1,
            label,
            has_nodule: truth.is_some(),
            split,
        },
        truth,
    }
}

/// In-memory dataset, subjects in index order.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<SyntheticSubject>, DataError> {
    cfg.validate()?;
    Ok(subject_plan(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, (label, split))| generate_subject(cfg, i, label, split))
        .collect())
}

/// Writes `images/*.cfni` and `manifest.csv` under `out_dir`.
pub fn generate_dataset(cfg: &GeneratorConfig, out_dir: &Path) -> Result<PathBuf, DataError> {
    cfg.validate()?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
    let mut entries = Vec::with_capacity(cfg.n_subjects);
    for (i, (label, split)) in subject_plan(cfg).into_iter().enumerate() {
        let s = generate_subject(cfg, i, label, split);
        let r = s.record;
        let t0_path = images.join(format!("{}_t0.cfni", r.subject_id));
        let t1_path = images.join(format!("{}_t1.cfni", r.subject_id));
        write_image(&r.x0, &t0_path)?;
        write_image(&r.x1, &t1_path)?;
        entries.push(ManifestEntry {
            subject_id: r.subject_id,
            pair_id: r.pair_id,
            t0_path,
            t1_path,
            label: r.label,
            has_nodule: r.has_nodule,
            split: r.split,
        });
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig { n_subjects: n, seed: 11, ..Default::default() }
    }

    #[test]
    fn plan_counts_and_stratified_splits() {
        let plan = subject_plan(&GeneratorConfig::default());
        let count = |f: &dyn Fn(&(Label, Split)) -> bool| plan.iter().filter(|p| f(p)).count();
        assert_eq!(count(&|p| p.0 == Label::None), 400);
        assert_eq!(count(&|p| p.0 == Label::Malignant), 320);
        assert_eq!(count(&|p| p.1 == Split::Train), 1200);
        assert_eq!(count(&|p| p.1 == Split::Val), 300);
        assert_eq!(count(&|p| p.1 == Split::Test), 500);
        assert_eq!(count(&|p| p.0 == Label::Malignant && p.1 == Split::Test), 80);
    }

    #[test]
    fn values_in_unit_range_and_labels_consistent() {
        for s in generate(&small(30)).unwrap() {
            let r = &s.record;
            assert_eq!(r.x0.shape(), &[64, 64]);
            assert_eq!(r.x0.shape(), r.x1.shape());
            assert!(r.x0.data().iter().chain(r.x1.data()).all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(r.label == Label::None, !r.has_nodule);
            assert_eq!(s.truth.is_some(), r.has_nodule);
        }
    }

    #[test]
    fn background_differs_only_by_noise() {
        let cfg = small(60);
        for s in generate(&cfg).unwrap() {
            let size = cfg.image_size;
            let diff: Vec<f32> = (0..size * size)
                .filter(|&i| {
                    let Some(t) = s.truth else { return true };
                    let (y, x) = ((i / size) as f32 + 0.5, (i % size) as f32 + 0.5);
                    let d = ((y - t.center.0).powi(2) + (x - t.center.1).powi(2)).sqrt();
                    d > t.max_radius() + 4.0
                })
                .map(|i| s.record.x1.data()[i] - s.record.x0.data()[i])
                .collect();
            let n = diff.len() as f32;
            let mean = diff.iter().sum::<f32>() / n;
            let sd = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f32>() / n).sqrt();
            assert!(sd <= 2.0 * cfg.noise_sigma * 2f32.sqrt(), "{}: sd {sd}", s.record.subject_id);
        }
    }

    #[test]
    fn malignant_growth_exceeds_benign() {
        let subjects = generate(&GeneratorConfig { n_subjects: 2000, ..Default::default() }).unwrap();
        let mean_r1 = |l: Label| {
            let v: Vec<f32> =
                subjects.iter().filter(|s| s.record.label == l).map(|s| s.truth.unwrap().r1).collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        assert!(mean_r1(Label::Malignant) >= 1.25 * mean_r1(Label::Benign));
    }

    #[test]
    fn radius_oracles() {
        let subjects = generate(&GeneratorConfig { n_subjects: 2000, ..Default::default() }).unwrap();
        let nodules: Vec<(NoduleTruth, bool)> = subjects
            .iter()
            .filter_map(|s| s.truth.map(|t| (t, s.record.label == Label::Malignant)))
            .collect();
        let labels: Vec<bool> = nodules.iter().map(|n| n.1).collect();
        let score = |f: fn(&NoduleTruth) -> f32| {
            let s: Vec<f32> = nodules.iter().map(|n| f(&n.0)).collect();
            crate::diagnostics::auroc(&s, &labels).unwrap()
        };
        // r0 and growth are independent uniforms, so the T1 radius ceiling is about 0.85
        assert!(score(|t| t.r0) <= 0.6);
        assert_eq!(score(|t| t.r1 / t.r0), 1.0);
        let t1 = score(|t| t.r1);
        assert!((0.8..0.9).contains(&t1), "{t1}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small(1);
        c.malignant_growth = (1.0, 1.8);
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.image_size = 60;
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.malignant_fraction = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn subject_streams_are_independent_of_dataset_size() {
        let a = generate(&small(5)).unwrap();
        let b = generate_subject(&small(500), 3, a[3].record.label, a[3].record.split);
        assert_eq!(a[3].record.x0, b.record.x0);
    }
}
