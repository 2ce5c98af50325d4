//! Bias-corrected Adam over named parameters.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

/// Apply one update to every trainable parameter. `grads` must hold an
/// entry for each of them.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let names: Vec<String> = params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    if let Some(missing) = names.iter().find(|n| !grads.contains_key(*n)) {
        return Err(Error::MissingGradient(missing.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for name in names {
        let g = &grads[&name];
        let current = params.value(&name)?;
        if g.shape() != current.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for `{name}` is {:?}, parameter is {:?}",
                g.shape(),
                current.shape()
            )));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        let mut next = current.data().to_vec();
        for (((p, &gi), mi), vi) in next.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *p -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
        params.set(&name, Tensor::new(current.shape().to_vec(), next)?)?;
    }
    Ok(())
}
