//! Named parameter stores and seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Read access to named tensors, implemented by trainable and frozen stores alike.
pub trait Params {
    fn tensor(&self, name: &str) -> Result<&Tensor>;
}

/// Trainable parameters, kept sorted by name.
#[derive(Debug, Clone, Default)]
pub struct VarStore {
    vars: BTreeMap<String, Var>,
}

/// Frozen parameters (the EMA teacher).
#[derive(Debug, Clone, Default)]
pub struct TensorStore {
    tensors: BTreeMap<String, Tensor>,
}

impl Params for VarStore {
    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }
}

impl Params for TensorStore {
    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }
}

impl VarStore {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.vars.insert(name.into(), Var::from_tensor(&tensor)?);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Overwrites a parameter in place, keeping its identity for autograd.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", var.dims(), value.dims())));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Detached copies of the parameters whose names start with any of `prefixes`.
    pub fn snapshot(&self, prefixes: &[&str]) -> Result<TensorStore> {
        let mut out = TensorStore::default();
        for (name, var) in &self.vars {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                out.insert(name.clone(), var.as_tensor().copy()?.detach());
            }
        }
        Ok(out)
    }
}

impl TensorStore {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Host-side initializers driven by an explicit random source.
pub(crate) struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
    pub dtype: DType,
    pub device: &'a Device,
}

impl<R: Rng> Init<'_, R> {
    fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.tensor(data, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.tensor(data, shape)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Tensor> {
        self.tensor(vec![value; shape.iter().product()], shape)
    }
}
