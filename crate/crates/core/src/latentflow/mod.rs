//! Time-conditioned velocity field on the frozen latent space, its Euler
//! integrator and the three training objectives.

mod train;

pub use train::{
    finetune_ac, train_ba, train_fm, AcOutcome, FlowEpoch, FlowOutcome, FlowStage, FlowTrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::autoenc::{record_decoder, AutoencError, Encoded};
use crate::batching::image_batch;
use crate::corrae::{CorrAEModel, CorrAeError};
use crate::dataio::{ImagePairRecord, Label};
use crate::diagnostics::{BinaryClassifier, DiagnosticsError};
use crate::tensor::{
    adam_step, AdamConfig, AdamState, Array, Bound, Initializer, ParamStore, Tape, TensorError, Var, LEAKY_SLOPE,
};

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autoenc(#[from] AutoencError),
    #[error(transparent)]
    CorrAe(#[from] CorrAeError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("non-finite state at Euler step {step}")]
    NonFinite { step: usize },
    #[error("pair {index} contains a nodule; background alignment needs nodule-free pairs")]
    NodulePair { index: usize },
    #[error("record {index} has no malignancy label")]
    Unlabeled { index: usize },
    #[error("latent shape {left:?} does not match {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },
    #[error("{stage} stage diverged at epoch {epoch}, step {step}")]
    Diverged { stage: FlowStage, epoch: usize, step: usize, last_good: Box<FlowField> },
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("no training pairs")]
    EmptyData,
}

/// Channel widths of the velocity U-Net.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FlowArch {
    /// Down path; the up path mirrors the first three.
    pub channels: [usize; 4],
    pub latent_channels: usize,
}

impl FlowArch {
    pub fn full() -> Self {
        Self { channels: [32, 64, 128, 256], latent_channels: 4 }
    }

    pub fn narrow(div: usize) -> Self {
        Self { channels: Self::full().channels.map(|c| (c / div).max(1)), ..Self::full() }
    }
}

const DOWN: [(&str, usize); 4] = [("c1", 1), ("c2", 2), ("c3", 2), ("c4", 2)];
const UP: [&str; 3] = ["u1", "u2", "u3"];

/// Velocity model `v(z, t)`; `t` enters as one constant input channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub arch: FlowArch,
    pub params: ParamStore,
}

impl FlowField {
    pub fn new(arch: FlowArch, seed: u64) -> Self {
        let mut params = ParamStore::new(seed);
        let mut init = Initializer::new(seed);
        let [c1, c2, c3, c4] = arch.channels;
        let lc = arch.latent_channels;
        for ((name, _), (cin, cout)) in DOWN.iter().zip([(lc + 1, c1), (c1, c2), (c2, c3), (c3, c4)]) {
            init.conv(&mut params, name, 3, cin, cout);
        }
        for (name, (cin, cout)) in UP.iter().zip([(c4, c3), (c3, c2), (c2, c1)]) {
            init.conv_transpose(&mut params, name, 3, 2, cin, cout);
        }
        init.conv_transpose(&mut params, "u4", 3, 1, c1, lc);
        Self { arch, params }
    }

    /// A field whose output is `c` (per latent channel) everywhere.
    pub fn constant(arch: FlowArch, c: &[f32]) -> Result<Self, FlowError> {
        if c.len() != arch.latent_channels {
            return Err(FlowError::Shape { left: vec![c.len()], right: vec![arch.latent_channels] });
        }
        let mut f = Self::new(arch, 0);
        for (_, a) in f.params.iter_mut() {
            a.data_mut().fill(0.0);
        }
        f.params.insert("u4.b", Array::from_vec(&[c.len()], c.to_vec())?);
        Ok(f)
    }

    pub fn zeros(arch: FlowArch) -> Self {
        let n = arch.latent_channels;
        Self::constant(arch, &vec![0.0; n]).expect("length matches")
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Records `v(z, t)` for `z` of shape `[N, h, w, c]` and per-item `t`.
    pub fn record(&self, tape: &mut Tape, p: &Bound, z: Var, t: &[f32]) -> Result<Var, FlowError> {
        let s = tape.shape(z).to_vec();
        if s.len() != 4 || s[3] != self.arch.latent_channels || t.len() != s[0] {
            return Err(FlowError::Shape { left: s, right: vec![t.len(), 0, 0, self.arch.latent_channels] });
        }
        let per = s[1] * s[2];
        let time = tape.constant(Array::from_fn(&[s[0], s[1], s[2], 1], |i| t[i / per]));
        let mut h = tape.concat_channels(z, time)?;
        let mut skips = Vec::with_capacity(3);
        for (name, stride) in DOWN {
            let w = (p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?);
            h = tape.conv2d(h, w.0, w.1, stride, 1).map_err(|e| in_layer(name, e))?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            skips.push(h);
        }
        skips.pop();
        for name in UP {
            let skip = skips.pop().expect("three skips");
            let hw = (tape.shape(skip)[1], tape.shape(skip)[2]);
            let w = (p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?);
            h = tape.conv_transpose2d(h, w.0, w.1, 2, 1, hw).map_err(|e| in_layer(name, e))?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = tape.add(h, skip).map_err(|e| in_layer(name, e))?;
        }
        let (w, b) = (p.get("u4.w")?, p.get("u4.b")?);
        Ok(tape.conv_transpose2d(h, w, b, 1, 1, (s[1], s[2])).map_err(|e| in_layer("u4", e))?)
    }

    /// `v(z, t)` for a batch at a shared time.
    pub fn velocity(&self, z: &Array, t: f32) -> Result<Array, FlowError> {
        let mut tape = Tape::new();
        let p = tape.bind_frozen(&self.params);
        let zv = tape.constant(z.clone());
        let v = self.record(&mut tape, &p, zv, &vec![t; z.batch()])?;
        Ok(tape.value(v).clone())
    }

    /// Euler endpoint from `z0` after `steps` uniform steps up to `up_to`.
    pub fn integrate(&self, z0: &Array, steps: usize, up_to: f32) -> Result<Array, FlowError> {
        euler_integrate(z0, steps, up_to as f64, |z, t| self.velocity(z, t as f32))
    }
}

fn in_layer(layer: &str, e: TensorError) -> TensorError {
    TensorError::InLayer { layer: layer.into(), source: Box::new(e) }
}

/// State types the Euler solver can advance.
pub trait EulerState: Sized {
    /// `self + h·v`.
    fn step(&self, h: f64, v: &Self) -> Result<Self, FlowError>;
    fn is_finite(&self) -> bool;
}

impl EulerState for f64 {
    fn step(&self, h: f64, v: &Self) -> Result<Self, FlowError> {
        Ok(self + h * v)
    }

    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

impl EulerState for Array {
    fn step(&self, h: f64, v: &Self) -> Result<Self, FlowError> {
        let h = h as f32;
        self.zip_map(v, |z, dz| z + h * dz).map_err(|_| FlowError::Shape { left: self.shape().to_vec(), right: v.shape().to_vec() })
    }

    fn is_finite(&self) -> bool {
        Array::is_finite(self)
    }
}

/// `z ← z + (up_to/steps)·v(z, t_k)` with `t_k = k·up_to/steps`, `k = 0..steps`.
pub fn euler_integrate<S, F>(z0: &S, steps: usize, up_to: f64, mut v: F) -> Result<S, FlowError>
where
    S: EulerState + Clone,
    F: FnMut(&S, f64) -> Result<S, FlowError>,
{
    if steps == 0 {
        return Err(FlowError::Config("Euler needs at least one step".into()));
    }
    let h = up_to / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let dz = v(&z, k as f64 * h)?;
        z = z.step(h, &dz)?;
        if !z.is_finite() {
            return Err(FlowError::NonFinite { step: k });
        }
    }
    Ok(z)
}

/// Euler integration recorded on `tape` so gradients reach the field.
pub fn record_euler(
    tape: &mut Tape,
    field: &FlowField,
    p: &Bound,
    z0: Var,
    steps: usize,
    up_to: f32,
) -> Result<Var, FlowError> {
    if steps == 0 {
        return Err(FlowError::Config("Euler needs at least one step".into()));
    }
    let n = tape.shape(z0)[0];
    let h = up_to / steps as f32;
    let mut z = z0;
    for k in 0..steps {
        let v = field.record(tape, p, z, &vec![k as f32 * h; n])?;
        let dz = tape.scale(v, h);
        z = tape.add(z, dz)?;
        if !tape.value(z).is_finite() {
            return Err(FlowError::NonFinite { step: k });
        }
    }
    Ok(z)
}

/// Baseline/follow-up latents `E₀(x₀)`, `E₁(x₁)` of a record set.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPairs {
    pub z0: Array,
    pub z1: Array,
    pub labels: Vec<Label>,
}

impl LatentPairs {
    pub fn encode(model: &CorrAEModel, records: &[ImagePairRecord]) -> Result<Self, FlowError> {
        let n = records.len();
        let (mut z0, mut z1) = (Vec::new(), Vec::new());
        let mut shape = Vec::new();
        for start in (0..n).step_by(128) {
            let chunk = &records[start..(start + 128).min(n)];
            let a = model.encode0(&image_batch(chunk.iter().map(|r| &r.x0))?)?.z;
            let b = model.encode1(&image_batch(chunk.iter().map(|r| &r.x1))?)?.z;
            shape = a.shape().to_vec();
            z0.extend_from_slice(a.data());
            z1.extend_from_slice(b.data());
        }
        if n == 0 {
            return Err(FlowError::EmptyData);
        }
        shape[0] = n;
        Ok(Self {
            z0: Array::from_vec(&shape, z0)?,
            z1: Array::from_vec(&shape, z1)?,
            labels: records.iter().map(|r| r.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        Self { z0: self.z0.gather(idx), z1: self.z1.gather(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    fn check_background(&self) -> Result<(), FlowError> {
        match self.labels.iter().position(|&l| l != Label::None) {
            Some(index) => Err(FlowError::NodulePair { index }),
            None => Ok(()),
        }
    }
}

fn check_pair(z0: &Array, z1: &Array) -> Result<(), FlowError> {
    if z0.shape() != z1.shape() {
        return Err(FlowError::Shape { left: z0.shape().to_vec(), right: z1.shape().to_vec() });
    }
    Ok(())
}

fn record_ba_loss(tape: &mut Tape, field: &FlowField, p: &Bound, h0: &Array, h1: &Array, steps: usize) -> Result<Var, FlowError> {
    check_pair(h0, h1)?;
    let z0 = tape.constant(h0.clone());
    let target = tape.constant(h1.clone());
    let end = record_euler(tape, field, p, z0, steps, 1.0)?;
    Ok(tape.mse(end, target)?)
}

/// `mean ‖h₁ − Euler(v, h₀)‖²`.
pub fn ba_loss(field: &FlowField, h0: &Array, h1: &Array, steps: usize) -> Result<f32, FlowError> {
    check_pair(h0, h1)?;
    let end = field.integrate(h0, steps, 1.0)?;
    Ok(mse(&end, h1))
}

/// One Adam step on the background-alignment loss of `batch`; returns the
/// loss before the update.
pub fn ba_loss_and_step(
    field: &mut FlowField,
    state: &mut AdamState,
    batch: &LatentPairs,
    steps: usize,
    adam: AdamConfig,
) -> Result<f32, FlowError> {
    batch.check_background()?;
    let mut tape = Tape::new();
    let p = tape.bind(&field.params);
    let loss = record_ba_loss(&mut tape, field, &p, &batch.z0, &batch.z1, steps)?;
    let value = tape.value(loss).item();
    let grads = tape.backward_scalar(loss)?;
    drop(tape);
    adam_step(&mut field.params, &grads, state, adam)?;
    Ok(value)
}

fn record_fm_loss(tape: &mut Tape, field: &FlowField, p: &Bound, z0: &Array, z1: &Array, t: &[f32]) -> Result<Var, FlowError> {
    check_pair(z0, z1)?;
    let per = z0.len() / z0.batch().max(1);
    let zt = Array::from_fn(z0.shape(), |i| {
        let s = t[i / per];
        s * z1.data()[i] + (1.0 - s) * z0.data()[i]
    });
    let target = tape.constant(z1.zip_map(z0, |a, b| a - b)?);
    let zt = tape.constant(zt);
    let v = field.record(tape, p, zt, t)?;
    Ok(tape.mse(v, target)?)
}

/// `mean ‖(z₁ − z₀) − v(t·z₁ + (1 − t)·z₀, t)‖²` with per-item `t`.
pub fn fm_loss(field: &FlowField, z0: &Array, z1: &Array, t: &[f32]) -> Result<f32, FlowError> {
    let mut tape = Tape::new();
    let p = tape.bind_frozen(&field.params);
    let l = record_fm_loss(&mut tape, field, &p, z0, z1, t)?;
    Ok(tape.value(l).item())
}

/// Malignancy sign: `+1` benign, `−1` malignant.
fn ac_signs(labels: &[Label]) -> Result<Vec<f32>, FlowError> {
    labels
        .iter()
        .enumerate()
        .map(|(index, l)| match l {
            Label::Benign => Ok(1.0),
            Label::Malignant => Ok(-1.0),
            Label::None => Err(FlowError::Unlabeled { index }),
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn record_ac_loss(
    tape: &mut Tape,
    field: &FlowField,
    p: &Bound,
    model: &CorrAEModel,
    ensemble: &[BinaryClassifier],
    enc: &Encoded,
    signs: &[f32],
    steps: usize,
) -> Result<Var, FlowError> {
    if ensemble.is_empty() {
        return Err(FlowError::Config("auxiliary loss needs at least one classifier".into()));
    }
    let z0 = tape.constant(enc.z.clone());
    let skips = enc.skips.clone().map(|s| tape.constant(s));
    let end = record_euler(tape, field, p, z0, steps, 1.0)?;
    let d1 = tape.bind_frozen(model.d1());
    let x1 = record_decoder(tape, &d1, model.arch(), end, &skips)?;
    let s = tape.constant(Array::from_vec(&[signs.len(), 1], signs.to_vec())?);
    let mut total = None;
    for clf in ensemble {
        let logits = clf.record_logits(tape, x1)?;
        let prob = tape.sigmoid(logits);
        let signed = tape.mul(prob, s)?;
        let m = tape.mean(signed);
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty ensemble"), 1.0 / ensemble.len() as f32))
}

/// Mean over classifiers and items of `s(x)·f(D₁(Euler(v, E₀(x₀))))`.
pub fn ac_loss(
    field: &FlowField,
    model: &CorrAEModel,
    ensemble: &[BinaryClassifier],
    x0: &Array,
    labels: &[Label],
    steps: usize,
) -> Result<f32, FlowError> {
    let signs = ac_signs(labels)?;
    let enc = model.encode0(x0)?;
    let mut tape = Tape::new();
    let p = tape.bind_frozen(&field.params);
    let l = record_ac_loss(&mut tape, field, &p, model, ensemble, &enc, &signs, steps)?;
    Ok(tape.value(l).item())
}

/// Predicted follow-up latent and image for a baseline batch `[N, H, W, 1]`.
pub fn infer_followup(
    model: &CorrAEModel,
    field: &FlowField,
    x0: &Array,
    steps: usize,
) -> Result<(Array, Array), FlowError> {
    let n = x0.batch();
    let (mut zs, mut xs) = (Vec::new(), Vec::new());
    let (mut zshape, mut xshape) = (Vec::new(), x0.shape().to_vec());
    for start in (0..n).step_by(128) {
        let idx: Vec<usize> = (start..(start + 128).min(n)).collect();
        let enc = model.encode0(&x0.gather(&idx))?;
        let z1 = field.integrate(&enc.z, steps, 1.0)?;
        let x1 = model.decode1(&Encoded { z: z1.clone(), skips: enc.skips })?;
        zshape = z1.shape().to_vec();
        xshape = x1.shape().to_vec();
        zs.extend_from_slice(z1.data());
        xs.extend_from_slice(x1.data());
    }
    zshape[0] = n;
    xshape[0] = n;
    Ok((Array::from_vec(&zshape, zs)?, Array::from_vec(&xshape, xs)?))
}

fn mse(a: &Array, b: &Array) -> f32 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    (s / a.len().max(1) as f64) as f32
}

/// Mean squared error between Euler endpoints from `z0` and the true `z1`.
pub fn endpoint_error(field: &FlowField, pairs: &LatentPairs, steps: usize) -> Result<f32, FlowError> {
    let end = field.integrate(&pairs.z0, steps, 1.0)?;
    Ok(mse(&end, &pairs.z1))
}

/// Mean over `t ∈ {¼, ½, ¾}` of `‖v(z_t, t) − (z̃₁ − z₀)‖²` along the chord to
/// the Euler endpoint `z̃₁`.
pub fn straightness(field: &FlowField, pairs: &LatentPairs, steps: usize) -> Result<f32, FlowError> {
    let end = field.integrate(&pairs.z0, steps, 1.0)?;
    let chord = end.zip_map(&pairs.z0, |a, b| a - b)?;
    let mut total = 0.0;
    for t in [0.25f32, 0.5, 0.75] {
        let zt = pairs.z0.zip_map(&chord, |z, d| z + t * d)?;
        total += mse(&field.velocity(&zt, t)?, &chord);
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::{AeArch, AutoencoderModel, Discriminator};
    use crate::corrae::{init_from_base, Lambdas};
    use crate::diagnostics::pixel_classifier_spec;
    use crate::tensor::grad_check_fn;

    fn small() -> FlowArch {
        FlowArch { channels: [4, 4, 6, 6], latent_channels: 4 }
    }

    fn latents(n: usize, salt: usize) -> Array {
        Array::from_fn(&[n, 4, 4, 4], |i| ((((i + salt) * 7919) % 97) as f32 / 97.0) - 0.5)
    }

    fn constant_classifier(p: f32) -> BinaryClassifier {
        let spec = pixel_classifier_spec(32);
        let mut params = spec.init_params(0);
        for (_, a) in params.iter_mut() {
            a.data_mut().fill(0.0);
        }
        params.insert("head.b", Array::from_vec(&[1], vec![(p / (1.0 - p)).ln()]).unwrap());
        BinaryClassifier::from_params(spec, params).unwrap()
    }

    fn corr_model() -> CorrAEModel {
        let arch = AeArch::narrow(8, 16);
        let base = AutoencoderModel::new(arch.clone(), 1);
        init_from_base(&base, &Discriminator::new(&arch, 32, 2), Lambdas::default()).unwrap()
    }

    #[test]
    fn field_preserves_latent_shape() {
        for hw in [8, 4, 2] {
            let f = FlowField::new(FlowArch::narrow(4), 0);
            let z = Array::full(&[2, hw, hw, 4], 0.3);
            assert_eq!(f.velocity(&z, 0.5).unwrap().shape(), &[2, hw, hw, 4]);
        }
        let f = FlowField::new(FlowArch::full(), 0);
        assert_eq!(f.params.get("c1.w").unwrap().shape(), &[3, 3, 5, 32]);
        assert_eq!(f.params.get("u4.w").unwrap().shape(), &[3, 3, 4, 32]);
    }

    #[test]
    fn time_changes_the_velocity() {
        let f = FlowField::new(small(), 3);
        let z = latents(2, 0);
        assert_ne!(f.velocity(&z, 0.0).unwrap(), f.velocity(&z, 1.0).unwrap());
        assert_eq!(f.velocity(&z, 0.3).unwrap(), f.velocity(&z, 0.3).unwrap());
    }

    #[test]
    fn zero_and_constant_fields() {
        let z0 = latents(3, 1);
        for steps in [1, 7, 100] {
            assert_eq!(FlowField::zeros(small()).integrate(&z0, steps, 1.0).unwrap(), z0);
        }
        let z0 = Array::from_fn(&[2, 4, 4, 4], |i| (i % 8) as f32 * 0.25);
        let c = [0.5, -1.0, 2.0, 0.25];
        let field = FlowField::constant(small(), &c).unwrap();
        let want = Array::from_fn(z0.shape(), |i| z0.data()[i] + c[i % 4]);
        for steps in [1, 2, 8, 64] {
            assert_eq!(field.integrate(&z0, steps, 1.0).unwrap(), want);
        }
        let end = field.integrate(&z0, 100, 1.0).unwrap();
        assert!(end.zip_map(&want, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn euler_is_first_order_on_linear_field() {
        let end = |n: usize| euler_integrate(&1.0f64, n, 1.0, |z, _| Ok(*z)).unwrap();
        assert!((end(100) - 1.01f64.powi(100)).abs() < 1e-12);
        for n in [25, 50, 100] {
            let e = std::f64::consts::E;
            let ratio = (e - end(n)) / (e - end(2 * n));
            assert!((1.8..=2.2).contains(&ratio), "N = {n}: {ratio}");
        }
    }

    #[test]
    fn blow_up_reports_the_step() {
        let err = euler_integrate(&1.0f64, 10, 1.0, |z, _| Ok(z * 1e200)).unwrap_err();
        assert!(matches!(err, FlowError::NonFinite { step: 1 }), "{err}");
        assert!(matches!(euler_integrate(&1.0f64, 0, 1.0, |z, _| Ok(*z)), Err(FlowError::Config(_))));
    }

    #[test]
    fn recorded_euler_matches_eager() {
        let f = FlowField::new(small(), 4);
        let z0 = latents(2, 5);
        let mut tape = Tape::new();
        let p = tape.bind_frozen(&f.params);
        let zv = tape.constant(z0.clone());
        let end = record_euler(&mut tape, &f, &p, zv, 5, 1.0).unwrap();
        assert_eq!(tape.value(end), &f.integrate(&z0, 5, 1.0).unwrap());
    }

    #[test]
    fn gradients_through_integration() {
        let f = FlowField::new(FlowArch { channels: [3, 3, 4, 4], latent_channels: 4 }, 6);
        let z0 = latents(2, 2);
        let report = grad_check_fn(
            &f.params,
            |tape, p| {
                let z = tape.constant(z0.clone());
                record_euler(tape, &f, p, z, 3, 1.0).map_err(|e| match e {
                    FlowError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn flow_matching_loss_cases() {
        let z0 = Array::from_fn(&[2, 4, 4, 4], |i| (i % 5) as f32 * 0.5);
        let c = [1.0, -0.5, 0.25, 2.0];
        let z1 = Array::from_fn(z0.shape(), |i| z0.data()[i] + c[i % 4]);
        let t = [0.3, 0.9];
        assert_eq!(fm_loss(&FlowField::constant(small(), &c).unwrap(), &z0, &z1, &t).unwrap(), 0.0);
        let zero = fm_loss(&FlowField::zeros(small()), &z0, &z1, &t).unwrap();
        assert!((zero - mse(&z1, &z0)).abs() < 1e-6);

        let z0 = Array::zeros(&[1, 1, 1, 4]);
        let z1 = Array::full(&[1, 1, 1, 4], 2.0);
        let ones = FlowField::constant(small(), &[1.0; 4]).unwrap();
        assert_eq!(fm_loss(&ones, &z0, &z1, &[0.4]).unwrap(), 1.0);
        assert!(matches!(fm_loss(&ones, &z0, &latents(1, 0), &[0.4]), Err(FlowError::Shape { .. })));
    }

    #[test]
    fn background_alignment_cases() {
        let zero = FlowField::zeros(small());
        let h0 = latents(3, 0);
        assert_eq!(ba_loss(&zero, &h0, &h0, 20).unwrap(), 0.0);
        let h1 = latents(3, 9);
        assert!((ba_loss(&zero, &h0, &h1, 20).unwrap() - mse(&h1, &h0)).abs() < 1e-7);

        let mut field = FlowField::new(small(), 1);
        let batch = LatentPairs { z0: h0.clone(), z1: h1, labels: vec![Label::None, Label::Benign, Label::None] };
        let err = ba_loss_and_step(&mut field, &mut AdamState::default(), &batch, 4, AdamConfig::with_lr(1e-3));
        assert!(matches!(err, Err(FlowError::NodulePair { index: 1 })));
    }

    #[test]
    fn auxiliary_loss_signs() {
        let model = corr_model();
        let field = FlowField::zeros(FlowArch::narrow(8));
        let x0 = Array::full(&[2, 32, 32, 1], 0.3);
        let high = [constant_classifier(0.9)];
        let b = ac_loss(&field, &model, &high, &x0, &[Label::Benign, Label::Benign], 2).unwrap();
        assert!((b - 0.9).abs() < 1e-6);
        let m = ac_loss(&field, &model, &high, &x0, &[Label::Malignant, Label::Malignant], 2).unwrap();
        assert!((m + 0.9).abs() < 1e-6);
        let two = [constant_classifier(0.2), constant_classifier(0.8)];
        let mixed = ac_loss(&field, &model, &two, &x0, &[Label::Benign, Label::Benign], 2).unwrap();
        assert!((mixed - 0.5).abs() < 1e-6);
        let err = ac_loss(&field, &model, &high, &x0, &[Label::Benign, Label::None], 2).unwrap_err();
        assert!(matches!(err, FlowError::Unlabeled { index: 1 }));
    }

    #[test]
    fn zero_field_inference_is_cross_reconstruction() {
        let model = corr_model();
        let x0 = Array::from_fn(&[3, 32, 32, 1], |i| (i % 13) as f32 / 13.0);
        let (z, x) = infer_followup(&model, &FlowField::zeros(FlowArch::narrow(8)), &x0, 100).unwrap();
        let enc = model.encode0(&x0).unwrap();
        assert_eq!(z, enc.z);
        assert_eq!(x, model.decode1(&enc).unwrap());
        let field = FlowField::new(FlowArch::narrow(8), 2);
        let a = infer_followup(&model, &field, &x0, 10).unwrap();
        assert_eq!(a, infer_followup(&model, &field, &x0, 10).unwrap());
        assert_ne!(a.0, enc.z);
    }
}
