use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// He-normal with the given fan-in and negative slope of the following
    /// leaky rectifier.
    Kaiming { fan_in: usize, slope: f64 },
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
}

/// Named parameters of one model, kept in a sorted map so every traversal
/// (initialization, checksums, archives) has a fixed order.
///
/// A frozen store hands out detached tensors: they never enter the autograd
/// graph, so optimizers cannot see them and backprop never reaches them.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    frozen: bool,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            frozen: false,
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Builder<'_> {
        Builder { store: self, prefix: String::new() }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` declared twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Kaiming { fan_in, slope } => {
                let std = (2.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut self.rng)).collect()
            }
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = self.handle(&var);
        self.vars.insert(name, var);
        Ok(handle)
    }

    fn handle(&self, var: &Var) -> Tensor {
        if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place; every layer holding the tensor sees
    /// the new value.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::ArchitectureMismatch(format!("unexpected parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::ArchitectureMismatch(format!(
                "`{name}` has shape {:?}, archive has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Deep copies of every parameter. Optimizer updates write into the
    /// variables in place, so plain handles would not stay fixed.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?))).collect()
    }
}

/// Hierarchical name scope over a [`ParamStore`].
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder { store: self.store, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_checksum() {
        let make = |seed| {
            let mut s = ParamStore::new(seed, DType::F32);
            s.root().pp("a").param("w", &[4, 3], Init::Kaiming { fan_in: 3, slope: 0.2 }).unwrap();
            s.root().param("b", &[4], Init::Uniform { fan_in: 3 }).unwrap();
            s.checksum().unwrap()
        };
        assert_eq!(make(7), make(7));
        assert_ne!(make(7), make(8));
    }

    #[test]
    fn frozen_handles_are_detached() {
        let mut s = ParamStore::new(0, DType::F32).frozen();
        let t = s.root().param("w", &[2], Init::Ones).unwrap();
        let x = candle_core::Var::new(&[1f32, 2.0], &Device::Cpu).unwrap();
        let grads = (t.mul(x.as_tensor()).unwrap()).sum_all().unwrap().backward().unwrap();
        assert!(grads.get(s.get("w").unwrap().as_tensor()).is_none());
        assert!(grads.get(x.as_tensor()).is_some());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(0, DType::F32);
        s.root().param("w", &[1], Init::Zeros).unwrap();
        assert!(s.root().param("w", &[1], Init::Zeros).is_err());
    }
}
