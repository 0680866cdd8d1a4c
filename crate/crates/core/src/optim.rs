//! Bias-corrected Adam.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn for_params(params: &ParamStore) -> Self {
        let zeros = |n: usize| vec![0.0; n];
        Self {
            m: params.iter().map(|(k, t)| (k.to_string(), zeros(t.numel()))).collect(),
            v: params.iter().map(|(k, t)| (k.to_string(), zeros(t.numel()))).collect(),
            t: 0,
        }
    }
}

/// One Adam update of every parameter from its accumulated gradient.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in params.iter() {
        let (Some(m), Some(v)) = (state.m.get(name), state.v.get(name)) else {
            return Err(Error::shape("adam_step", format!("no optimizer state for {name:?}")));
        };
        if m.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::shape(
                "adam_step",
                format!("state for {name:?} has {} values, parameter has {}", m.len(), p.numel()),
            ));
        }
    }
    if state.m.len() != params.len() {
        return Err(Error::shape("adam_step", "optimizer state tracks a different parameter set"));
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state.m.get_mut(name).expect("validated above");
        let v = state.v.get_mut(name).expect("validated above");
        let grad = p.grad.clone();
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
