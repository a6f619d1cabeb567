//! Adam with bias-corrected moment estimates.

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Applies one Adam update in place. Every gradient is checked for NaN/inf
/// before any parameter is touched.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return Err(TensorError::Invalid(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.lr
        )));
    }
    for (name, g) in grads.iter() {
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteGradient {
                name: name.to_string(),
                index,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        if !state.m.contains(name) {
            state.m.insert(name, Tensor::zeros(g.shape()));
            state.v.insert(name, Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name).expect("moment").data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(name).expect("moment").data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = state.m.get(name).expect("moment").data();
        let v = state.v.get(name).expect("moment").data();
        let p = params.get_mut(name).expect("checked").data_mut();
        for i in 0..p.len() {
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
