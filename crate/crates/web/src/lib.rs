//! wasm-bindgen exports for the static demo page in `www/`.

use corrflow::dataio::{generate_subject, GeneratorConfig, Label, Split};
use corrflow::diagnostics::{auprc, auroc, ssim};
use corrflow::latentflow::euler_integrate;
use wasm_bindgen::prelude::*;

/// A synthetic baseline/follow-up pair, row-major `size × size` in [0, 1].
#[wasm_bindgen]
pub struct Pair {
    size: usize,
    x0: Vec<f32>,
    x1: Vec<f32>,
    ssim: f64,
}

#[wasm_bindgen]
impl Pair {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn baseline(&self) -> Vec<f32> {
        self.x0.clone()
    }

    pub fn followup(&self) -> Vec<f32> {
        self.x1.clone()
    }

    /// SSIM of the follow-up against the baseline.
    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}

fn label_of(name: &str) -> Result<Label, JsError> {
    match name {
        "benign" => Ok(Label::Benign),
        "malignant" => Ok(Label::Malignant),
        "none" => Ok(Label::None),
        other => Err(JsError::new(&format!("unknown label `{other}`"))),
    }
}

/// Generates subject `index` of the synthetic set with the given label.
#[wasm_bindgen(js_name = syntheticPair)]
pub fn synthetic_pair(seed: u64, index: usize, label: &str, early_signal: f32, size: usize) -> Result<Pair, JsError> {
    let cfg = GeneratorConfig { seed, early_signal_strength: early_signal, image_size: size, ..Default::default() };
    cfg.validate().map_err(|e| JsError::new(&e.to_string()))?;
    let s = generate_subject(&cfg, index, label_of(label)?, Split::Test);
    let score = ssim(&s.record.x0, &s.record.x1).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(Pair { size, x0: s.record.x0.data().to_vec(), x1: s.record.x1.data().to_vec(), ssim: score })
}

/// Euler solution of dz/dt = z from z(0) = 1 at t = 1 with `steps` steps,
/// returned as `[endpoint, |endpoint − e|, error(steps) / error(2·steps)]`.
#[wasm_bindgen(js_name = eulerExp)]
pub fn euler_exp(steps: usize) -> Result<Vec<f64>, JsError> {
    let solve = |n: usize| {
        euler_integrate(&1.0f64, n, 1.0, |z, _| Ok(*z)).map_err(|e| JsError::new(&e.to_string()))
    };
    let e = std::f64::consts::E;
    let end = solve(steps)?;
    let finer = solve(2 * steps)?;
    Ok(vec![end, (end - e).abs(), (end - e).abs() / (finer - e).abs()])
}

/// Trajectory `z(t_k)` for `k = 0..=steps` of the same problem.
#[wasm_bindgen(js_name = eulerPath)]
pub fn euler_path(steps: usize) -> Result<Vec<f64>, JsError> {
    let mut path = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let z = if k == 0 {
            1.0
        } else {
            euler_integrate(&1.0f64, k, k as f64 / steps as f64, |z, _| Ok(*z)).map_err(|e| JsError::new(&e.to_string()))?
        };
        path.push(z);
    }
    Ok(path)
}

/// `[auroc, auprc]` of scores against 0/1 labels.
#[wasm_bindgen(js_name = rankMetrics)]
pub fn rank_metrics(scores: &[f32], labels: &[u8]) -> Result<Vec<f64>, JsError> {
    let labels: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let err = |e: corrflow::diagnostics::MetricError| JsError::new(&e.to_string());
    Ok(vec![auroc(scores, &labels).map_err(err)?, auprc(scores, &labels).map_err(err)?])
}
