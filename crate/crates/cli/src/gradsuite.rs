//! The `grad-check` suite: every layer type and each model family at a
//! width small enough for dense finite differences.

use std::time::Instant;

use corrflow::autoenc::{record_decoder, record_encoder, AeArch, AutoencError, Discriminator};
use corrflow::diagnostics::latent_classifier_spec;
use corrflow::latentflow::{FlowArch, FlowError, FlowField};
use corrflow::tensor::{grad_check, grad_check_fn, Array, GradCheckReport, GraphSpec, LayerSpec, ParamStore, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub numel: usize,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed())
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.report.max_error()).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("check,params,max_rel_error,refined,passed\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{:.3e},{},{}\n",
                e.name,
                e.numel,
                e.report.max_error(),
                e.report.refined,
                e.report.passed()
            ));
        }
        out
    }
}

fn input(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

fn unit(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_| rng.gen_range(0.05f32..0.95))
}

fn flat(e: AutoencError) -> TensorError {
    match e {
        AutoencError::Tensor(t) => t,
        other => TensorError::NonFinite(other.to_string()),
    }
}

fn flat_flow(e: FlowError) -> TensorError {
    match e {
        FlowError::Tensor(t) => t,
        other => TensorError::NonFinite(other.to_string()),
    }
}

fn tiny_ae() -> AeArch {
    AeArch { channels: [2, 3, 4], latent_channels: 2, skip_levels: vec![1, 2, 3], disc_channels: [2, 3, 3, 4] }
}

/// Same topology as the pixel classifier with narrow widths.
fn tiny_pixel_classifier(size: usize) -> GraphSpec {
    let s = size / 8;
    GraphSpec::new(
        &[size, size, 1],
        vec![
            LayerSpec::conv("c1", 1, 2, 3, 2, 1),
            LayerSpec::LeakyRelu,
            LayerSpec::conv("c2", 2, 3, 3, 2, 1),
            LayerSpec::LeakyRelu,
            LayerSpec::conv("c3", 3, 4, 3, 2, 1),
            LayerSpec::LeakyRelu,
            LayerSpec::Flatten,
            LayerSpec::dense("head", 4 * s * s, 1),
        ],
    )
}

fn layer_checks() -> Result<Vec<(&'static str, ParamStore, GradCheckReport)>, TensorError> {
    let mut out = Vec::new();
    let stacks: [(&str, GraphSpec, Vec<usize>); 6] = [
        ("conv", GraphSpec::new(&[5, 5, 2], vec![LayerSpec::conv("c", 2, 3, 3, 2, 1)]), vec![2, 5, 5, 2]),
        (
            "conv_transpose",
            GraphSpec::new(
                &[3, 3, 2],
                vec![LayerSpec::ConvTranspose { name: "t".into(), cin: 2, cout: 3, kernel: 3, stride: 2, pad: 1, out_pad: 1 }],
            ),
            vec![2, 3, 3, 2],
        ),
        ("dense", GraphSpec::new(&[6], vec![LayerSpec::dense("d", 6, 4)]), vec![3, 6]),
        (
            "leaky_relu",
            GraphSpec::new(&[6], vec![LayerSpec::dense("d", 6, 5), LayerSpec::LeakyRelu, LayerSpec::dense("o", 5, 2)]),
            vec![4, 6],
        ),
        (
            "sigmoid",
            GraphSpec::new(&[6], vec![LayerSpec::dense("d", 6, 5), LayerSpec::Sigmoid, LayerSpec::dense("o", 5, 2)]),
            vec![4, 6],
        ),
        (
            "upsample_flatten",
            GraphSpec::new(
                &[2, 2, 2],
                vec![LayerSpec::conv("c", 2, 2, 3, 1, 1), LayerSpec::Upsample2x, LayerSpec::Flatten, LayerSpec::dense("d", 32, 3)],
            ),
            vec![2, 2, 2, 2],
        ),
    ];
    for (i, (name, spec, shape)) in stacks.into_iter().enumerate() {
        let params = spec.init_params(20 + i as u64);
        let report = grad_check(&spec, &params, &input(&shape, 40 + i as u64), TOLERANCE)?;
        out.push((name, params, report));
    }

    // losses: mse, batch Pearson, BCE with logits, channel concat
    let spec = GraphSpec::new(&[4], vec![LayerSpec::dense("d", 4, 6)]);
    let params = spec.init_params(30);
    let (x, y) = (input(&[5, 4], 31), input(&[5, 6], 32));
    let targets: Vec<f32> = (0..30).map(|i| (i % 2) as f32).collect();
    let report = grad_check_fn(
        &params,
        |t, b| {
            let xv = t.constant(x.clone());
            let h = spec.record(t, b, xv)?;
            let yv = t.constant(y.clone());
            let mse = t.mse(h, yv)?;
            let r = t.batch_pearson(h, yv)?;
            let logits = t.reshape(h, &[30, 1])?;
            let bce = t.bce_with_logits(logits, &targets)?;
            let h4 = t.reshape(h, &[5, 1, 1, 6])?;
            let y4 = t.reshape(yv, &[5, 1, 1, 6])?;
            let cat = t.concat_channels(h4, y4)?;
            let sq = t.mul(cat, cat)?;
            let m = t.mean(sq);
            let s = t.add(mse, r)?;
            let s = t.add(s, bce)?;
            t.add(s, m)
        },
        TOLERANCE,
    )?;
    out.push(("losses", params, report));
    Ok(out)
}

fn model_checks() -> Result<Vec<(&'static str, ParamStore, GradCheckReport)>, TensorError> {
    let mut out = Vec::new();
    let arch = tiny_ae();
    let x = unit(&[2, 8, 8, 1], 50);

    let enc = arch.init_encoder(51);
    let report = grad_check_fn(
        &enc,
        |t, b| {
            let xv = t.constant(x.clone());
            let e = record_encoder(t, b, xv).map_err(flat)?;
            let z = t.mean(e.z);
            let s = t.mean(e.skips[2]);
            t.add(z, s)
        },
        TOLERANCE,
    )?;
    out.push(("encoder", enc, report));

    let dec = arch.init_decoder(52);
    let (z, skips) = (input(&[2, 1, 1, 2], 53), [input(&[2, 8, 8, 2], 54), input(&[2, 4, 4, 3], 55), input(&[2, 2, 2, 4], 56)]);
    let report = grad_check_fn(
        &dec,
        |t, b| {
            let zv = t.constant(z.clone());
            let sv = skips.clone().map(|s| t.constant(s));
            record_decoder(t, b, &arch, zv, &sv).map_err(flat)
        },
        TOLERANCE,
    )?;
    out.push(("decoder", dec, report));

    let disc = Discriminator::new(&arch, 32, 57);
    let img = unit(&[2, 32, 32, 1], 58);
    let report = grad_check_fn(
        &disc.params,
        |t, b| {
            let xv = t.constant(img.clone());
            disc.record(t, b, xv).map_err(flat)
        },
        TOLERANCE,
    )?;
    out.push(("discriminator", disc.params.clone(), report));

    let field = FlowField::new(FlowArch { channels: [3, 3, 4, 4], latent_channels: 2 }, 59);
    let zl = input(&[2, 4, 4, 2], 60);
    let report = grad_check_fn(
        &field.params,
        |t, b| {
            let zv = t.constant(zl.clone());
            field.record(t, b, zv, &[0.2, 0.7]).map_err(flat_flow)
        },
        TOLERANCE,
    )?;
    out.push(("flow_field", field.params.clone(), report));

    let spec = tiny_pixel_classifier(16);
    let params = spec.init_params(61);
    let report = grad_check(&spec, &params, &unit(&[3, 16, 16, 1], 62), TOLERANCE)?;
    out.push(("pixel_classifier", params, report));

    let spec = latent_classifier_spec(&[2, 2, 2]);
    let params = spec.init_params(63);
    let report = grad_check(&spec, &params, &input(&[3, 2, 2, 2], 64), TOLERANCE)?;
    out.push(("latent_classifier", params, report));
    Ok(out)
}

pub fn run_suite() -> Result<SuiteReport, TensorError> {
    let start = Instant::now();
    let entries = layer_checks()?
        .into_iter()
        .chain(model_checks()?)
        .map(|(name, params, report)| SuiteEntry { name, numel: params.numel(), report })
        .collect();
    Ok(SuiteReport { entries, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_family_and_passes() {
        let suite = run_suite().unwrap();
        let names: Vec<&str> = suite.entries.iter().map(|e| e.name).collect();
        for family in ["encoder", "decoder", "discriminator", "flow_field", "pixel_classifier", "latent_classifier"] {
            assert!(names.contains(&family), "{family}");
        }
        assert!(suite.entries.iter().all(|e| e.numel <= 10_000));
        assert!(suite.passed(), "{}", suite.table());
    }
}
