use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its gradient buffer. Frozen
    /// parameters are never touched, whatever their grad buffer holds.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let c = self.config;
        if !(c.lr >= 0.0) {
            return Err(Error::Contract(format!("learning rate must be >= 0, got {}", c.lr)));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable() && p.tensor.grad.is_none()) {
            return Err(Error::Contract(format!(
                "trainable parameter `{}` has no gradient",
                p.name
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, p) in store.iter_mut() {
            if !p.trainable() {
                continue;
            }
            let n = p.tensor.numel();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let grad = p.tensor.grad.take().expect("checked above");
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                data[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}
