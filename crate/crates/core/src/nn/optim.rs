use serde::{Deserialize, Serialize};

use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per store entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, store: &ParameterStore) -> Result<Self> {
        cfg.validate()?;
        let zeros = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamState { cfg, step: 0, m: zeros.clone(), v: zeros })
    }

    /// Moments as named tensors, for checkpointing.
    pub fn to_named(&self, store: &ParameterStore) -> Vec<(String, Tensor)> {
        let names: Vec<&str> = store.names().collect();
        let mut out = Vec::with_capacity(2 * names.len());
        for (n, t) in names.iter().zip(&self.m) {
            out.push((format!("adam.m.{n}"), t.clone()));
        }
        for (n, t) in names.iter().zip(&self.v) {
            out.push((format!("adam.v.{n}"), t.clone()));
        }
        out
    }

    pub fn from_named(
        cfg: AdamConfig,
        step: u64,
        store: &ParameterStore,
        named: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut st = AdamState::new(cfg, store)?;
        st.step = step;
        for (i, (n, t)) in store.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut st.m[i]), ("adam.v.", &mut st.v[i])] {
                let key = format!("{prefix}{n}");
                let found = named
                    .iter()
                    .find(|(k, _)| *k == key)
                    .ok_or_else(|| Error::Version(format!("optimizer state lacks {key:?}")))?;
                if found.1.shape() != t.shape() {
                    return Err(Error::Version(format!("optimizer state {key:?} has the wrong shape")));
                }
                *slot = found.1.clone();
            }
        }
        Ok(st)
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    state.cfg.validate()?;
    if state.m.len() != store.len() {
        return Err(Error::shape("optimizer state does not match the parameter store"));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = store.grad(id).data().to_vec();
        crate::error::ensure_finite(&g, store.name(id))?;
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.value_mut(id).data_mut();
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn global_grad_norm(store: &ParameterStore) -> f64 {
    store
        .ids()
        .flat_map(|id| store.grad(id).data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping was needed).
pub fn clip_global_norm(store: &mut ParameterStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::config(format!("max gradient norm must be positive, got {max_norm}")));
    }
    let norm = global_grad_norm(store);
    if !norm.is_finite() {
        return Err(Error::numeric("gradient norm is not finite"));
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for g in store.grad_mut(id).data_mut() {
            *g *= scale;
        }
    }
    Ok(scale)
}
