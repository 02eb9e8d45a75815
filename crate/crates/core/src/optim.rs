//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::ParamRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0015,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    /// `(first, second)` moments, indexed like the registry. `None` until
    /// the parameter first receives a gradient.
    pub moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState) -> Self {
        Self { config, state }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Applies one update from the gradients stored in `params`, then drops
    /// them. Parameters without a gradient buffer are left untouched.
    pub fn step(&mut self, params: &mut ParamRegistry) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        if self.state.moments.len() < params.len() {
            self.state.moments.resize(params.len(), None);
        } else if self.state.moments.len() > params.len() {
            return Err(contract("Adam::step", "optimizer state has more slots than parameters"));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for (slot, tensor) in self.state.moments.iter_mut().zip(params.tensors_mut()) {
            let Some(grad) = tensor.take_grad() else { continue };
            let n = grad.len();
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(contract("Adam::step", "moment shape differs from parameter"));
            }
            for (((w, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}
