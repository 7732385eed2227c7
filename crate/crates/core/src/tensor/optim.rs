//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to parameters with two or more dimensions only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl OptimizerState {
    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(&id)?.as_slice(), self.v.get(&id)?.as_slice()))
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    /// One update of every trainable parameter at learning rate `lr`, using
    /// the accumulated `grad` fields. Frozen parameters are left alone.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id);
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::Contract(format!(
                    "missing gradient for trainable parameter {}",
                    store.name(id)
                )));
            }
        }
        self.state.step += 1;
        self.state.lr = lr;
        let c = self.config;
        let step = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(step);
        let bc2 = 1.0 - c.beta2.powi(step);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let decay = if t.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let n = t.len();
            let m = self.state.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.state.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let g = t.grad.take().expect("checked above");
            let data = t.data_mut();
            for i in 0..n {
                let gi = g[i] as f64;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = data[i] as f64;
                let w = w - lr * decay * w - lr * mhat / (vhat.sqrt() + c.eps);
                data[i] = w as f32;
            }
        }
        Ok(())
    }
}
