//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::GraphSpec;
use super::tape::{Bound, Tape, Var};
use super::{Array, ParamStore, TensorError};

/// Finite-difference half step.
pub const FD_STEP: f32 = 1e-3;

/// Half step used for entries whose `±FD_STEP` probes put some leaky-ReLU
/// input on the other side of zero.
pub const FD_KINK_STEP: f64 = 1e-7;

/// Largest parameter count accepted by the checker.
pub const MAX_CHECK_PARAMS: usize = 10_000;

/// Per-parameter result of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// `max_i |ad_i − fd_i|` over the larger of the array's gradient
    /// magnitude and a floor of `1e-3 ×` the global gradient magnitude.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Entries differenced at `FD_KINK_STEP` instead of `FD_STEP`.
    pub refined: usize,
    /// Set when a non-finite value was met; names the location.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Checks a sequential stack on `input` (batched).
pub fn grad_check(
    spec: &GraphSpec,
    params: &ParamStore,
    input: &Array,
    tolerance: f64,
) -> Result<GradCheckReport, TensorError> {
    grad_check_fn(
        params,
        |tape, bound| {
            let x = tape.constant(input.clone());
            spec.record(tape, bound, x)
        },
        tolerance,
    )
}

/// Checks any graph built by `build` from bound `params`.
///
/// The checked objective is `Σ rᵢ·yᵢ` for a fixed random projection `r`
/// (or `y` itself for scalar outputs). Finite differences replay the
/// recorded graph in `f64`, so `build` is called once.
pub fn grad_check_fn<F>(params: &ParamStore, build: F, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var, TensorError>,
{
    check_with(params, build, tolerance, Tape::new)
}

fn check_with<F>(
    params: &ParamStore,
    build: F,
    tolerance: f64,
    new_tape: fn() -> Tape,
) -> Result<GradCheckReport, TensorError>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var, TensorError>,
{
    let total = params.numel();
    if total > MAX_CHECK_PARAMS {
        return Err(TensorError::TooManyParams { count: total, limit: MAX_CHECK_PARAMS });
    }

    let mut tape = new_tape();
    let bound = tape.bind(params);
    let out = build(&mut tape, &bound)?;
    let out_shape = tape.shape(out).to_vec();
    let n_out: usize = out_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let proj = if n_out == 1 {
        Array::full(&out_shape, 1.0)
    } else {
        Array::from_fn(&out_shape, |_| rng.gen_range(-1.0f32..1.0))
    };
    let analytic = tape.backward(out, proj.clone())?;

    let step = FD_STEP as f64;
    let objective = |shift: (&str, usize, f64)| -> (f64, u64) {
        let (y, signs) = tape.replay_f64(out, Some(shift));
        (y.iter().zip(proj.data()).map(|(&a, &r)| a * r as f64).sum(), signs)
    };
    let base_signs = tape.replay_f64(out, None).1;
    let mut refined = 0;

    let mut failure = None;
    let mut numeric: Vec<(String, Vec<f64>)> = Vec::new();
    'outer: for (name, value) in params.iter() {
        let mut fd = vec![0.0f64; value.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let (mut h, (mut lu, su), (mut ld, sd)) = (step, objective((name, i, step)), objective((name, i, -step)));
            if su != base_signs || sd != base_signs {
                h = FD_KINK_STEP;
                lu = objective((name, i, h)).0;
                ld = objective((name, i, -h)).0;
                refined += 1;
            }
            if !lu.is_finite() || !ld.is_finite() {
                failure = Some(format!("non-finite objective perturbing {name}[{i}]"));
                break 'outer;
            }
            *slot = (lu - ld) / (2.0 * h);
        }
        numeric.push((name.to_string(), fd));
    }

    for (name, g) in analytic.iter() {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            failure.get_or_insert(format!("non-finite gradient at {name}[{i}]"));
        }
    }

    let global = numeric
        .iter()
        .flat_map(|(_, fd)| fd.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * global).max(1e-12);

    let checks = numeric
        .into_iter()
        .map(|(name, fd)| {
            let zeros;
            let ad: &[f32] = match analytic.get(&name) {
                Some(a) => a.data(),
                None => {
                    zeros = vec![0.0f32; fd.len()];
                    &zeros
                }
            };
            let scale = fd
                .iter()
                .zip(ad)
                .fold(floor, |m, (&f, &a)| m.max(f.abs()).max(a.abs() as f64));
            let err = fd.iter().zip(ad).fold(0.0f64, |m, (&f, &a)| m.max((f - a as f64).abs()));
            ParamCheck { name, numel: fd.len(), max_rel_error: err / scale }
        })
        .collect();

    Ok(GradCheckReport { params: checks, tolerance, failure, refined })
}

#[cfg(test)]
mod tests {
    use super::super::layers::LayerSpec;
    use super::super::tape::Fault;
    use super::*;

    fn input(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
    }

    fn conv_stack() -> GraphSpec {
        GraphSpec::new(
            &[6, 6, 2],
            vec![
                LayerSpec::conv("c1", 2, 4, 3, 2, 1),
                LayerSpec::LeakyRelu,
                LayerSpec::Flatten,
                LayerSpec::dense("d1", 36, 3),
            ],
        )
    }

    #[test]
    fn linear_layer_quadratic_loss() {
        let spec = GraphSpec::new(&[5], vec![LayerSpec::dense("lin", 5, 3)]);
        let params = spec.init_params(1);
        let x = input(&[4, 5], 2);
        let target = input(&[4, 3], 3);
        let report = grad_check_fn(
            &params,
            |t, b| {
                let xv = t.constant(x.clone());
                let y = spec.record(t, b, xv)?;
                let tv = t.constant(target.clone());
                t.mse(y, tv)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn conv_leaky_dense_stack() {
        let spec = conv_stack();
        let params = spec.init_params(4);
        let report = grad_check(&spec, &params, &input(&[3, 6, 6, 2], 5), 1e-3).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params.len(), 4);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let spec = conv_stack();
        let params = spec.init_params(4);
        let x = input(&[3, 6, 6, 2], 5);
        let faulty = || {
            let mut t = Tape::new();
            t.fault = Some(Fault::LeakyReluSlope);
            t
        };
        let report = check_with(
            &params,
            |t, b| {
                let xv = t.constant(x.clone());
                spec.record(t, b, xv)
            },
            1e-3,
            faulty,
        )
        .unwrap();
        assert!(!report.passed(), "{report:?}");
    }

    #[test]
    fn rejects_oversized_models() {
        let spec = GraphSpec::new(&[200], vec![LayerSpec::dense("big", 200, 60)]);
        let params = spec.init_params(0);
        let err = grad_check(&spec, &params, &Array::zeros(&[1, 200]), 1e-3).unwrap_err();
        assert!(matches!(err, TensorError::TooManyParams { .. }));
    }

    #[test]
    fn every_primitive_passes() {
        // transposed conv, upsample, sigmoid, concat, mul, sub, pearson, bce
        let mut init = super::super::params::Initializer::new(9);
        let mut params = ParamStore::new(9);
        init.conv(&mut params, "c", 3, 3, 4);
        init.conv_transpose(&mut params, "t", 3, 2, 4, 2);
        let x = input(&[3, 4, 4, 1], 10);
        let other = input(&[3, 8, 8, 2], 11);
        let report = grad_check_fn(
            &params,
            |t, b| {
                let xv = t.constant(x.clone());
                let tc = t.constant(Array::full(&[3, 4, 4, 2], 0.3));
                let h = t.concat_channels(xv, tc)?;
                let h = t.conv2d(h, b.get("c.w")?, b.get("c.b")?, 1, 1)?;
                let h = t.leaky_relu(h, 0.2);
                let h = t.conv_transpose2d(h, b.get("t.w")?, b.get("t.b")?, 2, 1, (8, 8))?;
                let u = t.upsample2x(xv)?;
                let u = t.concat_channels(u, u)?;
                let h = t.mul(h, u)?;
                let o = t.constant(other.clone());
                let h = t.sub(h, o)?;
                let s = t.sigmoid(h);
                let flat = t.reshape(s, &[3, 128])?;
                let r = t.batch_pearson(flat, flat)?;
                let r2 = {
                    let of = t.constant(other.clone().reshape(&[3, 128])?);
                    t.batch_pearson(flat, of)?
                };
                let m = t.mean(s);
                let logits = t.reshape(h, &[3 * 128, 1])?;
                let targets: Vec<f32> = (0..3 * 128).map(|i| (i % 3 == 0) as u8 as f32).collect();
                let bce = t.bce_with_logits(logits, &targets)?;
                let m = t.add(m, bce)?;
                let sum = t.add(r, r2)?;
                let sum = t.add(sum, m)?;
                Ok(t.scale(sum, 3.0))
            },
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
