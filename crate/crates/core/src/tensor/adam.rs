use super::{Array, ParamStore, TensorError};

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Parameters without a gradient entry are left untouched (their moments do
/// not decay). The step counter always advances by one.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    cfg: AdamConfig,
) -> Result<(), TensorError> {
    for (name, g) in grads.iter() {
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: format!("adam_step `{name}`"),
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for (name, g) in grads.iter() {
        if !state.m.contains(name) {
            state.m.insert(name, Array::zeros(g.shape()));
            state.v.insert(name, Array::zeros(g.shape()));
        }
        let m = state.m.get_mut(name).expect("moment inserted").data_mut();
        for (mi, &gi) in m.iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(name).expect("moment inserted").data_mut();
        for (vi, &gi) in v.iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = state.m.get(name).expect("moment").data();
        let v = state.v.get(name).expect("moment").data();
        let p = params.get_mut(name).expect("checked above").data_mut();
        for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
            let m_hat = mi as f64 / bc1;
            let v_hat = vi as f64 / bc2;
            *pi -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}
