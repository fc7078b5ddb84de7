use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer whose moment buffers are plain named tensors,
/// so they can be archived next to the parameters and restored exactly.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update to every parameter of `store` that has a gradient.
    /// Returns the global L2 norm of those gradients.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<f64> {
        if store.is_frozen() {
            return Err(Error::Config("refusing to optimize a frozen parameter store".into()));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut sq = 0.0f64;
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(sq.sqrt())
    }

    /// Moment buffers as `adam.m.<name>` / `adam.v.<name>` tensors.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("adam.m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("adam.v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn restore(cfg: AdamConfig, t: u64, tensors: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        let mut opt = Self::new(cfg);
        opt.t = t;
        for (k, tensor) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                opt.m.insert(name.to_string(), tensor);
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                opt.v.insert(name.to_string(), tensor);
            }
        }
        opt
    }
}
