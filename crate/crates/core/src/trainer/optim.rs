use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Peak-normalized learning rate: linear warmup over the first
/// `warmup_rate` of `total` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup_rate: f64, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warm = warmup_rate * total;
    if warm > 0.0 && step < warm {
        peak * step / warm
    } else if total > warm {
        peak * (total - step) / (total - warm)
    } else {
        peak
    }
}

/// KL weight after `step` of `total`: `alpha` ramped from 0 over the first
/// `anneal_rate` of training.
pub fn alpha_at(step: usize, total: usize, anneal_rate: f64, alpha: f64) -> f64 {
    let ramp = anneal_rate * total as f64;
    if ramp <= 0.0 {
        alpha
    } else {
        alpha * (step as f64 / ramp).min(1.0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| alloc::vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with the gradients held in `store`. Weight decay applies
    /// to matrices only, not to biases and norm gains.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::ConfigMismatch("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (k, p) in store.iter_mut().enumerate() {
            let decay = if p.value.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            if m.len() != p.grad.len() {
                return Err(Error::ConfigMismatch(alloc::format!(
                    "optimizer state for {} has wrong size",
                    p.name
                )));
            }
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -= lr * (mh / (libm::sqrt(vh) + self.eps) + decay * data[i]);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
