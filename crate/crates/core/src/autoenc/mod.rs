//! Base autoencoder with skip connections, patch discriminator and the
//! perceptual/adversarial reconstruction loss.

mod train;

pub use train::{reconstruction_l2, train_base_ae, AeEpoch, BaseAeConfig, BaseAeOutcome};
pub(crate) use train::{joined, warmup_steps};

use serde::{Deserialize, Serialize};

use crate::diagnostics::BinaryClassifier;
use crate::tensor::{Array, Bound, GraphSpec, LayerSpec, ParamStore, Tape, TensorError, Var, LEAKY_SLOPE};

#[derive(Debug, thiserror::Error)]
pub enum AutoencError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image shape {0:?} must be H×W with H and W divisible by 8")]
    Indivisible(Vec<usize>),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, last_good: Box<(AutoencoderModel, Discriminator)> },
    #[error("empty training split")]
    EmptyData,
}

/// Channel widths of the encoder, decoder and discriminator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AeArch {
    /// Encoder layers 1–3; the decoder mirrors them in reverse.
    pub channels: [usize; 3],
    pub latent_channels: usize,
    /// Encoder levels (1–3) whose features are merged into the decoder.
    pub skip_levels: Vec<usize>,
    pub disc_channels: [usize; 4],
}

impl AeArch {
    /// Widths of the reference architecture.
    pub fn full() -> Self {
        Self { channels: [32, 64, 128], latent_channels: 4, skip_levels: vec![1, 2, 3], disc_channels: [64, 128, 256, 512] }
    }

    /// Reference widths divided by `ae` (encoder/decoder) and `disc`.
    pub fn narrow(ae: usize, disc: usize) -> Self {
        let f = Self::full();
        Self {
            channels: f.channels.map(|c| (c / ae).max(1)),
            disc_channels: f.disc_channels.map(|c| (c / disc).max(1)),
            ..f
        }
    }

    fn has_skip(&self, level: usize) -> bool {
        self.skip_levels.contains(&level)
    }

    pub fn encoder_spec(&self) -> Vec<LayerSpec> {
        let [c1, c2, c3] = self.channels;
        vec![
            LayerSpec::conv("e1", 1, c1, 3, 1, 1),
            LayerSpec::conv("e2", c1, c2, 4, 2, 1),
            LayerSpec::conv("e3", c2, c3, 4, 2, 1),
            LayerSpec::conv("e4", c3, self.latent_channels, 4, 2, 1),
        ]
    }

    pub fn decoder_spec(&self) -> Vec<LayerSpec> {
        let [c1, c2, c3] = self.channels;
        let mut layers = vec![
            LayerSpec::conv("d1", self.latent_channels, c3, 3, 1, 1),
            LayerSpec::conv("d2", c3, c2, 3, 1, 1),
            LayerSpec::conv("d3", c2, c1, 3, 1, 1),
            LayerSpec::conv("d4", c1, 1, 3, 1, 1),
        ];
        for (level, c) in [(3, c3), (2, c2), (1, c1)] {
            if self.has_skip(level) {
                layers.push(LayerSpec::conv(&format!("merge{level}"), c, c, 1, 1, 0));
            }
        }
        layers
    }

    pub fn init_encoder(&self, seed: u64) -> ParamStore {
        GraphSpec::new(&[8, 8, 1], self.encoder_spec()).init_params(seed)
    }

    pub fn init_decoder(&self, seed: u64) -> ParamStore {
        GraphSpec::new(&[1, 1, self.latent_channels], self.decoder_spec()).init_params(seed)
    }

    pub fn discriminator_spec(&self, image_size: usize) -> GraphSpec {
        let [c1, c2, c3, c4] = self.disc_channels;
        GraphSpec::new(
            &[image_size, image_size, 1],
            vec![
                LayerSpec::conv("s1", 1, c1, 4, 2, 1),
                LayerSpec::LeakyRelu,
                LayerSpec::conv("s2", c1, c2, 4, 2, 1),
                LayerSpec::LeakyRelu,
                LayerSpec::conv("s3", c2, c3, 4, 2, 1),
                LayerSpec::LeakyRelu,
                LayerSpec::conv("s4", c3, c4, 4, 1, 1),
                LayerSpec::LeakyRelu,
                LayerSpec::conv("s5", c4, 1, 4, 1, 1),
            ],
        )
    }
}

fn check_shapes(store: &ParamStore, want: &ParamStore, what: &str) -> Result<(), AutoencError> {
    for (name, a) in want.iter() {
        match store.get(name) {
            Some(got) if got.shape() == a.shape() => {}
            Some(got) => {
                return Err(AutoencError::Architecture(format!(
                    "{what} `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    a.shape()
                )))
            }
            None => return Err(AutoencError::Architecture(format!("{what} is missing `{name}`"))),
        }
    }
    if store.len() != want.len() {
        return Err(AutoencError::Architecture(format!("{what} has {} entries, expected {}", store.len(), want.len())));
    }
    Ok(())
}

/// Records one conv layer (`{name}.w`, `{name}.b`) from `p`.
fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
    let (w, b) = (p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?);
    tape.conv2d(x, w, b, stride, pad).map_err(|e| TensorError::InLayer { layer: name.into(), source: Box::new(e) })
}

/// Encoder output on a tape: latent plus skip features of levels 1–3.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub z: Var,
    pub skips: [Var; 3],
}

pub fn record_encoder(tape: &mut Tape, p: &Bound, x: Var) -> Result<EncodedVars, AutoencError> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] % 8 != 0 || s[2] % 8 != 0 || s[3] != 1 {
        return Err(AutoencError::Indivisible(s));
    }
    let h1 = conv(tape, p, "e1", x, 1, 1)?;
    let h1 = tape.leaky_relu(h1, LEAKY_SLOPE);
    let h2 = conv(tape, p, "e2", h1, 2, 1)?;
    let h2 = tape.leaky_relu(h2, LEAKY_SLOPE);
    let h3 = conv(tape, p, "e3", h2, 2, 1)?;
    let h3 = tape.leaky_relu(h3, LEAKY_SLOPE);
    let z = conv(tape, p, "e4", h3, 2, 1)?;
    Ok(EncodedVars { z, skips: [h1, h2, h3] })
}

/// `skips` must come from the encoder that produced `z`; levels not in
/// `arch.skip_levels` are ignored.
pub fn record_decoder(tape: &mut Tape, p: &Bound, arch: &AeArch, z: Var, skips: &[Var; 3]) -> Result<Var, AutoencError> {
    let mut h = conv(tape, p, "d1", z, 1, 1)?;
    h = tape.leaky_relu(h, LEAKY_SLOPE);
    for (level, next) in [(3usize, "d2"), (2, "d3"), (1, "d4")] {
        h = tape.upsample2x(h)?;
        if arch.has_skip(level) {
            let m = conv(tape, p, &format!("merge{level}"), skips[level - 1], 1, 0)?;
            h = tape.add(h, m).map_err(|e| TensorError::InLayer { layer: format!("merge{level}"), source: Box::new(e) })?;
        }
        h = conv(tape, p, next, h, 1, 1)?;
        h = if next == "d4" { tape.sigmoid(h) } else { tape.leaky_relu(h, LEAKY_SLOPE) };
    }
    Ok(h)
}

/// Encoder, decoder and their shared architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel {
    pub arch: AeArch,
    pub encoder: ParamStore,
    pub decoder: ParamStore,
}

/// Latent batch `[N, h, w, c]` and skip features per level.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub z: Array,
    pub skips: [Array; 3],
}

impl AutoencoderModel {
    pub fn new(arch: AeArch, seed: u64) -> Self {
        let encoder = arch.init_encoder(seed);
        let decoder = arch.init_decoder(seed.wrapping_add(1));
        Self { arch, encoder, decoder }
    }

    pub fn from_params(arch: AeArch, encoder: ParamStore, decoder: ParamStore) -> Result<Self, AutoencError> {
        check_shapes(&encoder, &arch.init_encoder(0), "encoder")?;
        check_shapes(&decoder, &arch.init_decoder(0), "decoder")?;
        Ok(Self { arch, encoder, decoder })
    }

    /// Encodes an `[N, H, W, 1]` batch.
    pub fn encode(&self, x: &Array) -> Result<Encoded, AutoencError> {
        encode_with(&self.encoder, x)
    }

    pub fn decode(&self, enc: &Encoded) -> Result<Array, AutoencError> {
        decode_with(&self.arch, &self.decoder, enc)
    }

    pub fn reconstruct(&self, x: &Array) -> Result<Array, AutoencError> {
        self.decode(&self.encode(x)?)
    }

    pub fn fingerprint(&self) -> String {
        let mut all = ParamStore::new(0);
        all.extend_prefixed("enc.", &self.encoder);
        all.extend_prefixed("dec.", &self.decoder);
        all.fingerprint()
    }
}

pub fn encode_with(encoder: &ParamStore, x: &Array) -> Result<Encoded, AutoencError> {
    let mut tape = Tape::new();
    let p = tape.bind_frozen(encoder);
    let xv = tape.constant(x.clone());
    let e = record_encoder(&mut tape, &p, xv)?;
    Ok(Encoded { z: tape.value(e.z).clone(), skips: e.skips.map(|s| tape.value(s).clone()) })
}

pub fn decode_with(arch: &AeArch, decoder: &ParamStore, enc: &Encoded) -> Result<Array, AutoencError> {
    let mut tape = Tape::new();
    let p = tape.bind_frozen(decoder);
    let z = tape.constant(enc.z.clone());
    let skips = enc.skips.clone().map(|s| tape.constant(s));
    let y = record_decoder(&mut tape, &p, arch, z, &skips)?;
    Ok(tape.value(y).clone())
}

/// Patch discriminator with a linear output map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub spec: GraphSpec,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(arch: &AeArch, image_size: usize, seed: u64) -> Self {
        let spec = arch.discriminator_spec(image_size);
        let params = spec.init_params(seed);
        Self { spec, params }
    }

    pub fn record(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, AutoencError> {
        Ok(self.spec.record(tape, p, x)?)
    }

    /// Patch scores for a batch.
    pub fn score(&self, x: &Array) -> Result<Array, AutoencError> {
        let mut tape = Tape::new();
        let p = tape.bind_frozen(&self.params);
        let xv = tape.constant(x.clone());
        let y = self.record(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// First two conv blocks of a pixel classifier, frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    params: ParamStore,
}

impl PerceptualExtractor {
    pub fn from_classifier(clf: &BinaryClassifier) -> Result<Self, AutoencError> {
        let mut params = ParamStore::new(clf.seed());
        for name in ["c1.w", "c1.b", "c2.w", "c2.b"] {
            params.insert(name, clf.params().require(name)?.clone());
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Feature maps of both blocks.
    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<[Var; 2], AutoencError> {
        let p = tape.bind_frozen(&self.params);
        let f1 = conv(tape, &p, "c1", x, 2, 1)?;
        let f1 = tape.leaky_relu(f1, LEAKY_SLOPE);
        let f2 = conv(tape, &p, "c2", f1, 2, 1)?;
        let f2 = tape.leaky_relu(f2, LEAKY_SLOPE);
        Ok([f1, f2])
    }
}

/// Scalar loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l2: Var,
    pub perc: Var,
    pub adv: Var,
}

/// `‖x − x̃‖² + Σ_l ‖φ_l(x) − φ_l(x̃)‖² + w·mean((DS(x̃) − 1)²)`, all means.
///
/// `disc` is bound by the caller (frozen for generator updates).
pub fn record_recon_loss(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    phi: &PerceptualExtractor,
    disc: &Discriminator,
    disc_params: &Bound,
    adv_weight: f32,
) -> Result<LossVars, AutoencError> {
    let l2 = tape.mse(x_hat, x)?;
    let fx = phi.record(tape, x)?;
    let fy = phi.record(tape, x_hat)?;
    let p1 = tape.mse(fy[0], fx[0])?;
    let p2 = tape.mse(fy[1], fx[1])?;
    let perc = tape.add(p1, p2)?;
    let scores = disc.record(tape, disc_params, x_hat)?;
    let ones = tape.constant(Array::full(tape.shape(scores), 1.0));
    let adv = tape.mse(scores, ones)?;
    let weighted = tape.scale(adv, adv_weight);
    let total = tape.add(l2, perc)?;
    let total = tape.add(total, weighted)?;
    Ok(LossVars { total, l2, perc, adv })
}

/// Loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AeLoss {
    pub total: f32,
    pub l2: f32,
    pub perc: f32,
    pub adv: f32,
}

impl AeLoss {
    fn read(tape: &Tape, v: &LossVars) -> Self {
        Self {
            total: tape.value(v.total).item(),
            l2: tape.value(v.l2).item(),
            perc: tape.value(v.perc).item(),
            adv: tape.value(v.adv).item(),
        }
    }

    fn check(self) -> Result<Self, AutoencError> {
        if [self.total, self.l2, self.perc, self.adv].iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(AutoencError::NonFinite("reconstruction loss"))
        }
    }
}

/// Unweighted reconstruction, perceptual and adversarial loss of `model`
/// on an `[N, H, W, 1]` batch.
pub fn base_ae_loss(
    model: &AutoencoderModel,
    disc: &Discriminator,
    phi: &PerceptualExtractor,
    x: &Array,
) -> Result<AeLoss, AutoencError> {
    let mut tape = Tape::new();
    let e = tape.bind_frozen(&model.encoder);
    let d = tape.bind_frozen(&model.decoder);
    let s = tape.bind_frozen(&disc.params);
    let xv = tape.constant(x.clone());
    let enc = record_encoder(&mut tape, &e, xv)?;
    let y = record_decoder(&mut tape, &d, &model.arch, enc.z, &enc.skips)?;
    let v = record_recon_loss(&mut tape, xv, y, phi, disc, &s, 1.0)?;
    AeLoss::read(&tape, &v).check()
}

/// Least-squares discriminator objective
/// `mean((DS(real) − 1)²) + mean(DS(fake)²)`.
pub fn record_disc_loss(
    tape: &mut Tape,
    disc: &Discriminator,
    p: &Bound,
    real: Var,
    fake: Var,
) -> Result<Var, AutoencError> {
    if tape.shape(real) != tape.shape(fake) {
        return Err(TensorError::ShapeMismatch {
            op: "discriminator_loss".into(),
            left: tape.shape(real).to_vec(),
            right: tape.shape(fake).to_vec(),
        }
        .into());
    }
    let sr = disc.record(tape, p, real)?;
    let sf = disc.record(tape, p, fake)?;
    let ones = tape.constant(Array::full(tape.shape(sr), 1.0));
    let zeros = tape.constant(Array::zeros(tape.shape(sf)));
    let lr = tape.mse(sr, ones)?;
    let lf = tape.mse(sf, zeros)?;
    Ok(tape.add(lr, lf)?)
}

pub fn discriminator_loss(disc: &Discriminator, real: &Array, fake: &Array) -> Result<f32, AutoencError> {
    let mut tape = Tape::new();
    let p = tape.bind_frozen(&disc.params);
    let (r, f) = (tape.constant(real.clone()), tape.constant(fake.clone()));
    let l = record_disc_loss(&mut tape, disc, &p, r, f)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::pixel_classifier_spec;

    fn arch() -> AeArch {
        AeArch::narrow(8, 16)
    }

    fn image(n: usize, size: usize) -> Array {
        Array::from_fn(&[n, size, size, 1], |i| (i * 37 % 101) as f32 / 101.0)
    }

    /// Discriminator whose output is the constant `c`.
    fn constant_disc(c: f32) -> Discriminator {
        let mut d = Discriminator::new(&arch(), 32, 0);
        let w = d.params.get("s5.w").unwrap().shape().to_vec();
        d.params.insert("s5.w", Array::zeros(&w));
        d.params.insert("s5.b", Array::full(&[1], c));
        d
    }

    fn phi() -> PerceptualExtractor {
        PerceptualExtractor::from_classifier(&BinaryClassifier::new(pixel_classifier_spec(32), 2)).unwrap()
    }

    #[test]
    fn latent_and_output_shapes() {
        let m = AutoencoderModel::new(AeArch::full(), 0);
        let e = m.encode(&image(1, 64)).unwrap();
        assert_eq!(e.z.shape(), &[1, 8, 8, 4]);
        let m = AutoencoderModel::new(arch(), 0);
        let e = m.encode(&image(2, 32)).unwrap();
        assert_eq!(e.z.shape(), &[2, 4, 4, 4]);
        let y = m.decode(&e).unwrap();
        assert_eq!(y.shape(), &[2, 32, 32, 1]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(matches!(m.encode(&Array::zeros(&[1, 30, 32, 1])), Err(AutoencError::Indivisible(_))));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_latent() {
        let m = AutoencoderModel::new(arch(), 3);
        let e = m.encode(&Array::zeros(&[1, 16, 16, 1])).unwrap();
        assert!(e.z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_is_deterministic() {
        let m = AutoencoderModel::new(arch(), 3);
        let e = m.encode(&image(2, 32)).unwrap();
        assert!(m.decode(&e).unwrap().to_bits().eq(m.decode(&e).unwrap().to_bits()));
    }

    #[test]
    fn discriminator_is_a_patch_map() {
        let d = Discriminator::new(&AeArch::full(), 64, 0);
        assert_eq!(d.score(&image(1, 64)).unwrap().shape(), &[1, 6, 6, 1]);
    }

    #[test]
    fn loss_closed_forms() {
        let x = image(2, 32);
        let phi = phi();
        for (c, want) in [(1.0, 0.0), (0.0, 1.0)] {
            let disc = constant_disc(c);
            let mut tape = Tape::new();
            let s = tape.bind_frozen(&disc.params);
            let xv = tape.constant(x.clone());
            let v = record_recon_loss(&mut tape, xv, xv, &phi, &disc, &s, 1.0).unwrap();
            assert_eq!(tape.value(v.total).item(), want);
        }
    }

    #[test]
    fn disc_loss_closed_forms() {
        let x = image(2, 32);
        assert_eq!(discriminator_loss(&constant_disc(0.0), &x, &x).unwrap(), 1.0);
        assert_eq!(discriminator_loss(&constant_disc(1.0), &x, &x).unwrap(), 1.0);
        assert!(discriminator_loss(&constant_disc(1.0), &x, &image(1, 32)).is_err());
    }

    #[test]
    fn random_init_loss_terms_are_positive() {
        let m = AutoencoderModel::new(arch(), 7);
        let disc = Discriminator::new(&arch(), 32, 8);
        let l = base_ae_loss(&m, &disc, &phi(), &image(4, 32)).unwrap();
        assert!(l.l2 > 0.0 && l.perc > 0.0 && l.adv > 0.0, "{l:?}");
        assert!((l.total - (l.l2 + l.perc + l.adv)).abs() < 1e-6);
    }

    #[test]
    fn from_params_checks_architecture() {
        let m = AutoencoderModel::new(arch(), 0);
        let other = AeArch::narrow(4, 16);
        assert!(AutoencoderModel::from_params(other, m.encoder.clone(), m.decoder.clone()).is_err());
        assert!(AutoencoderModel::from_params(arch(), m.encoder.clone(), m.decoder.clone()).is_ok());
    }
}
