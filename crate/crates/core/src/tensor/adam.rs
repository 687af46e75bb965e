use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradMap, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a single tensor at step `t >= 1`.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hyper: &AdamConfig,
    t: u64,
) -> Result<()> {
    if hyper.lr <= 0.0 {
        return Err(Error::Optimizer(format!(
            "learning rate must be positive, got {}",
            hyper.lr
        )));
    }
    if t == 0 {
        return Err(Error::Optimizer("step index starts at 1".into()));
    }
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::Optimizer(
            "gradient/moment length differs from parameter".into(),
        ));
    }
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Adam state for one [`ParamSet`]: first/second moments per tensor and the
/// number of updates actually applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub hyper: AdamConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl Adam {
    /// Allocates one zeroed moment slot per tensor of `params`.
    pub fn new(params: &ParamSet, hyper: AdamConfig) -> Self {
        let moments = params
            .iter()
            .map(|(n, t)| (n.clone(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
            .collect();
        Adam {
            hyper,
            moments,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// FNV-1a over the step counter and every moment value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.step;
        for (m, v) in self.moments.values() {
            for x in m.iter().chain(v) {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    /// Apply one update. A frozen set is left untouched and its moment
    /// state does not advance. Tensors missing from `grads` are treated as
    /// having zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<()> {
        if params.is_frozen() {
            return Ok(());
        }
        if self.hyper.lr <= 0.0 {
            return Err(Error::Optimizer(format!(
                "learning rate must be positive, got {}",
                self.hyper.lr
            )));
        }
        let t = self.step + 1;
        for (name, tensor) in params.iter_mut() {
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Optimizer(format!("no moment state for parameter {name}")))?;
            let zeros;
            let g = match grads.get(name) {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![0.0; tensor.numel()];
                    &zeros
                }
            };
            adam_update(tensor.data_mut(), g, m, v, &self.hyper, t)?;
        }
        self.step = t;
        Ok(())
    }
}
