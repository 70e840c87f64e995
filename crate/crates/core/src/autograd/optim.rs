use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adaptive moment estimation over every tensor of a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Tensors without a
    /// gradient buffer are left untouched.
    pub fn step(&mut self, store: &mut ParameterStore) {
        let c = self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = store
                    .iter()
                    .filter_map(|(_, t)| t.grad())
                    .flatten()
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((t, m), v) in store.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                let gi = g[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state(&self, store: &ParameterStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (id, (name, t)) in store.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.push((
                format!("adam.m.{name}"),
                Tensor::new(shape.clone(), self.m[id].clone()).expect("moment shape"),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::new(shape, self.v[id].clone()).expect("moment shape"),
            ));
        }
        out
    }

    pub fn restore(
        config: AdamConfig,
        store: &ParameterStore,
        step: u64,
        state: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut adam = Adam::new(config, store);
        adam.step = step;
        for (id, (name, t)) in store.iter().enumerate() {
            for (prefix, buf) in [("adam.m.", &mut adam.m[id]), ("adam.v.", &mut adam.v[id])] {
                let key = format!("{prefix}{name}");
                let src = state
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                if src.1.len() != t.len() {
                    return Err(Error::Checkpoint(format!("optimizer state `{key}` has wrong size")));
                }
                buf.copy_from_slice(src.1.data());
            }
        }
        Ok(adam)
    }
}
