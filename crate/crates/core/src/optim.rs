//! Adam with bias correction folded into the step size.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    /// Keyed by parameter name.
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One Adam update over `params`; every parameter must carry a gradient.
/// Gradients are cleared afterwards.
///
/// Uses the step size `lr·√(1−β2ᵗ)/(1−β1ᵗ)` with `ε` added to the raw `√v`,
/// so the first step moves each coordinate by `lr·|g|/(|g| + ε/√(1−β2))`.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::contract(format!(
            "parameter {} has no gradient",
            p.name
        )));
    }
    for p in params.iter() {
        if let Some(mom) = state.moments.get(&p.name) {
            if mom.m.len() != p.value.numel() {
                return Err(Error::shape(format!(
                    "optimizer moments for {} hold {} values, parameter has {}",
                    p.name,
                    mom.m.len(),
                    p.value.numel()
                )));
            }
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let step_size = lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let n = p.value.numel();
        let mom = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(mom.m.iter_mut())
            .zip(mom.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= step_size * *m / (v.sqrt() + eps);
        }
    }
    Ok(())
}
