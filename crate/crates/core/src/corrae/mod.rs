//! Dual-branch correlational autoencoder warm-started from the base model.

mod train;

pub use train::{train_corr_ae, validation_pearson, CorrAeConfig, CorrAeOutcome, CorrEpoch};

use serde::{Deserialize, Serialize};

use crate::autoenc::{
    record_decoder, record_encoder, record_recon_loss, AeArch, AutoencError, AutoencoderModel,
    Discriminator, Encoded, PerceptualExtractor,
};
use crate::tensor::{Array, Bound, ParamStore, Tape, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum CorrAeError {
    #[error(transparent)]
    Autoenc(#[from] AutoencError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unpaired batch: {x0} baseline vs {x1} follow-up images")]
    Unpaired { x0: usize, x1: usize },
    #[error("model is frozen")]
    Frozen,
    #[error("correlational training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, last_good: Box<CorrAEModel> },
    #[error("empty training split")]
    EmptyData,
}

/// Weights of self-reconstruction, cross-reconstruction and correlation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 3]", into = "[f32; 3]")]
pub struct Lambdas {
    pub sr: f32,
    pub cr: f32,
    pub corr: f32,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { sr: 1.0, cr: 1.0, corr: 0.1 }
    }
}

impl From<[f32; 3]> for Lambdas {
    fn from([sr, cr, corr]: [f32; 3]) -> Self {
        Self { sr, cr, corr }
    }
}

impl From<Lambdas> for [f32; 3] {
    fn from(l: Lambdas) -> Self {
        [l.sr, l.cr, l.corr]
    }
}

/// Baseline branch `(e0, d0)`, follow-up branch `(e1, d1)` and the shared
/// discriminator.
///
/// Once frozen (after training) the parameters are only reachable through
/// shared references.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrAEModel {
    arch: AeArch,
    e0: ParamStore,
    e1: ParamStore,
    d0: ParamStore,
    d1: ParamStore,
    disc: Discriminator,
    lambdas: Lambdas,
    frozen: bool,
}

/// Copies the base encoder into both encoders and the base decoder into both
/// decoders.
pub fn init_from_base(base: &AutoencoderModel, disc: &Discriminator, lambdas: Lambdas) -> Result<CorrAEModel, CorrAeError> {
    let base = AutoencoderModel::from_params(base.arch.clone(), base.encoder.clone(), base.decoder.clone())?;
    Ok(CorrAEModel {
        e0: base.encoder.clone(),
        e1: base.encoder,
        d0: base.decoder.clone(),
        d1: base.decoder,
        arch: base.arch,
        disc: disc.clone(),
        lambdas,
        frozen: false,
    })
}

impl CorrAEModel {
    /// Reassembles a model from stored parameters, checking every store
    /// against `arch`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        arch: AeArch,
        [e0, e1, d0, d1]: [ParamStore; 4],
        disc: Discriminator,
        lambdas: Lambdas,
        frozen: bool,
    ) -> Result<Self, CorrAeError> {
        AutoencoderModel::from_params(arch.clone(), e0.clone(), d0.clone())?;
        AutoencoderModel::from_params(arch.clone(), e1.clone(), d1.clone())?;
        Ok(Self { arch, e0, e1, d0, d1, disc, lambdas, frozen })
    }

    pub fn arch(&self) -> &AeArch {
        &self.arch
    }

    pub fn e0(&self) -> &ParamStore {
        &self.e0
    }

    pub fn e1(&self) -> &ParamStore {
        &self.e1
    }

    pub fn d0(&self) -> &ParamStore {
        &self.d0
    }

    pub fn d1(&self) -> &ParamStore {
        &self.d1
    }

    pub fn disc(&self) -> &Discriminator {
        &self.disc
    }

    pub fn lambdas(&self) -> Lambdas {
        self.lambdas
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore); 4] {
        [("e0", &self.e0), ("e1", &self.e1), ("d0", &self.d0), ("d1", &self.d1)]
    }

    /// Hash over the four encoder/decoder stores.
    pub fn fingerprint(&self) -> String {
        let mut all = ParamStore::new(0);
        for (name, store) in self.stores() {
            all.extend_prefixed(&format!("{name}."), store);
        }
        all.fingerprint()
    }

    pub fn encode0(&self, x: &Array) -> Result<Encoded, CorrAeError> {
        Ok(crate::autoenc::encode_with(&self.e0, x)?)
    }

    pub fn encode1(&self, x: &Array) -> Result<Encoded, CorrAeError> {
        Ok(crate::autoenc::encode_with(&self.e1, x)?)
    }

    pub fn decode0(&self, enc: &Encoded) -> Result<Array, CorrAeError> {
        Ok(crate::autoenc::decode_with(&self.arch, &self.d0, enc)?)
    }

    pub fn decode1(&self, enc: &Encoded) -> Result<Array, CorrAeError> {
        Ok(crate::autoenc::decode_with(&self.arch, &self.d1, enc)?)
    }
}

/// Mean per-dimension Pearson correlation across the batch between two
/// latent batches `[N, ...]`. Zero-variance dimensions are skipped; returns 0
/// when none remain.
pub fn batch_pearson(a: &Array, b: &Array) -> Result<f32, CorrAeError> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let (fa, fb) = (flatten(&mut tape, va)?, flatten(&mut tape, vb)?);
    let r = tape.batch_pearson(fa, fb)?;
    Ok(tape.value(r).item())
}

fn flatten(tape: &mut Tape, v: Var) -> Result<Var, TensorError> {
    let s = tape.shape(v);
    let n = s.first().copied().unwrap_or(0);
    let d = s.iter().skip(1).product();
    tape.reshape(v, &[n, d])
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CorrLoss {
    pub total: f32,
    pub sr: f32,
    pub cr: f32,
    /// `−batch_pearson(E₀(X₀), E₁(X₁))`.
    pub corr: f32,
}

/// The four stores bound on one tape.
pub(crate) struct Branches {
    pub e0: Bound,
    pub e1: Bound,
    pub d0: Bound,
    pub d1: Bound,
}

pub(crate) struct CorrVars {
    pub total: Var,
    pub sr: Var,
    pub cr: Var,
    pub corr: Var,
    /// `D₀(E₀x₀), D₁(E₁x₁), D₀(E₁x₁), D₁(E₀x₀)`.
    pub outputs: [Var; 4],
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn record_corr_loss(
    tape: &mut Tape,
    arch: &AeArch,
    p: &Branches,
    x0: Var,
    x1: Var,
    phi: &PerceptualExtractor,
    disc: &Discriminator,
    disc_params: &Bound,
    lambdas: Lambdas,
    adv_weight: f32,
) -> Result<CorrVars, CorrAeError> {
    let (n0, n1) = (tape.shape(x0)[0], tape.shape(x1)[0]);
    if n0 != n1 {
        return Err(CorrAeError::Unpaired { x0: n0, x1: n1 });
    }
    let h0 = record_encoder(tape, &p.e0, x0)?;
    let h1 = record_encoder(tape, &p.e1, x1)?;
    let y00 = record_decoder(tape, &p.d0, arch, h0.z, &h0.skips)?;
    let y11 = record_decoder(tape, &p.d1, arch, h1.z, &h1.skips)?;
    let y01 = record_decoder(tape, &p.d0, arch, h1.z, &h1.skips)?;
    let y10 = record_decoder(tape, &p.d1, arch, h0.z, &h0.skips)?;
    let mut term = |x: Var, y: Var| record_recon_loss(tape, x, y, phi, disc, disc_params, adv_weight).map(|v| v.total);
    let (s0, s1, c0, c1) = (term(x0, y00)?, term(x1, y11)?, term(x0, y01)?, term(x1, y10)?);
    let sr = tape.add(s0, s1)?;
    let cr = tape.add(c0, c1)?;
    let (f0, f1) = (flatten(tape, h0.z)?, flatten(tape, h1.z)?);
    let r = tape.batch_pearson(f0, f1)?;
    let corr = tape.scale(r, -1.0);
    let a = tape.scale(sr, lambdas.sr);
    let b = tape.scale(cr, lambdas.cr);
    let c = tape.scale(corr, lambdas.corr);
    let total = tape.add(a, b)?;
    let total = tape.add(total, c)?;
    Ok(CorrVars { total, sr, cr, corr, outputs: [y00, y11, y01, y10] })
}

impl CorrVars {
    pub(crate) fn read(&self, tape: &Tape) -> CorrLoss {
        let v = |x: Var| tape.value(x).item();
        CorrLoss { total: v(self.total), sr: v(self.sr), cr: v(self.cr), corr: v(self.corr) }
    }
}

/// `λ₁·L_sr + λ₂·L_cr + λ₃·L_corr` on a paired `[N, H, W, 1]` batch, with the
/// full reconstruction loss (adversarial weight 1) inside each term.
pub fn corrae_loss(model: &CorrAEModel, phi: &PerceptualExtractor, x0: &Array, x1: &Array) -> Result<CorrLoss, CorrAeError> {
    let mut tape = Tape::new();
    let p = Branches {
        e0: tape.bind_frozen(&model.e0),
        e1: tape.bind_frozen(&model.e1),
        d0: tape.bind_frozen(&model.d0),
        d1: tape.bind_frozen(&model.d1),
    };
    let s = tape.bind_frozen(&model.disc.params);
    let (v0, v1) = (tape.constant(x0.clone()), tape.constant(x1.clone()));
    let vars = record_corr_loss(&mut tape, &model.arch, &p, v0, v1, phi, &model.disc, &s, model.lambdas, 1.0)?;
    let loss = vars.read(&tape);
    if [loss.total, loss.sr, loss.cr, loss.corr].iter().all(|v| v.is_finite()) {
        Ok(loss)
    } else {
        Err(AutoencError::NonFinite("correlational loss").into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::base_ae_loss;
    use crate::diagnostics::{pixel_classifier_spec, BinaryClassifier};
    use proptest::prelude::*;

    fn parts() -> (AutoencoderModel, Discriminator, PerceptualExtractor) {
        let arch = AeArch::narrow(8, 16);
        let base = AutoencoderModel::new(arch.clone(), 3);
        let disc = Discriminator::new(&arch, 32, 4);
        let phi = PerceptualExtractor::from_classifier(&BinaryClassifier::new(pixel_classifier_spec(32), 5)).unwrap();
        (base, disc, phi)
    }

    fn images(n: usize, salt: usize) -> Array {
        Array::from_fn(&[n, 32, 32, 1], |i| (((i + salt) * 7919) % 1000) as f32 / 1000.0)
    }

    fn arr(shape: &[usize], data: &[f32]) -> Array {
        Array::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn warm_start_copies_base() {
        let (base, disc, phi) = parts();
        let m = init_from_base(&base, &disc, Lambdas { sr: 1.0, cr: 0.0, corr: 0.0 }).unwrap();
        assert_eq!(m.e0(), m.e1());
        assert_eq!(m.d0(), &base.decoder);
        assert!(!m.is_frozen());
        let (x0, x1) = (images(4, 0), images(4, 11));
        let got = corrae_loss(&m, &phi, &x0, &x1).unwrap();
        let want = base_ae_loss(&base, &disc, &phi, &x0).unwrap().total + base_ae_loss(&base, &disc, &phi, &x1).unwrap().total;
        assert!((got.sr - want).abs() <= 1e-6, "{} vs {want}", got.sr);
        assert_eq!(got.total, got.sr);
    }

    #[test]
    fn identical_branches_give_perfect_correlation() {
        let (base, disc, phi) = parts();
        let m = init_from_base(&base, &disc, Lambdas { sr: 0.0, cr: 0.0, corr: 1.0 }).unwrap();
        let x = images(6, 3);
        let l = corrae_loss(&m, &phi, &x, &x).unwrap();
        assert_eq!(l.corr, -1.0);
        assert_eq!(l.total, -1.0);
    }

    #[test]
    fn unpaired_batch_is_rejected() {
        let (base, disc, phi) = parts();
        let m = init_from_base(&base, &disc, Lambdas::default()).unwrap();
        let err = corrae_loss(&m, &phi, &images(3, 0), &images(2, 0)).unwrap_err();
        assert!(matches!(err, CorrAeError::Unpaired { x0: 3, x1: 2 }));
    }

    #[test]
    fn mismatched_base_is_rejected() {
        let (mut base, disc, _) = parts();
        base.decoder = AeArch::narrow(4, 16).init_decoder(0);
        assert!(matches!(init_from_base(&base, &disc, Lambdas::default()), Err(CorrAeError::Autoenc(_))));
    }

    #[test]
    fn pearson_examples() {
        let a = Array::from_fn(&[8, 16], |i| ((i * 37) % 23) as f32 - 11.0);
        assert!((batch_pearson(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!((batch_pearson(&a, &a.scale(-1.0)).unwrap() + 1.0).abs() < 1e-6);
        let a = arr(&[3, 2], &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let b = arr(&[3, 2], &[1.0, 5.0, 2.0, 3.0, 3.0, 1.0]);
        assert!(batch_pearson(&a, &b).unwrap().abs() < 1e-7);
    }

    #[test]
    fn pearson_skips_constant_dimensions() {
        let a = arr(&[3, 2], &[1.0, 7.0, 2.0, 7.0, 3.0, 7.0]);
        let b = arr(&[3, 2], &[2.0, 1.0, 4.0, 2.0, 6.0, 3.0]);
        assert!((batch_pearson(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        let c = Array::full(&[3, 2], 1.0);
        assert_eq!(batch_pearson(&c, &b).unwrap(), 0.0);
        assert!(batch_pearson(&arr(&[1, 2], &[1.0, 2.0]), &arr(&[1, 2], &[1.0, 2.0])).is_err());
    }

    proptest! {
        #[test]
        fn pearson_is_affine_invariant(
            data in proptest::collection::vec(-5.0f32..5.0, 24),
            other in proptest::collection::vec(-5.0f32..5.0, 24),
            alpha in 0.1f32..10.0,
            beta in -3.0f32..3.0,
        ) {
            let a = arr(&[8, 3], &data);
            let b = arr(&[8, 3], &other);
            let r = batch_pearson(&a, &b).unwrap();
            let r2 = batch_pearson(&a.map(|v| alpha * v + beta), &b).unwrap();
            prop_assert!((r - r2).abs() < 1e-4, "{} vs {}", r, r2);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
