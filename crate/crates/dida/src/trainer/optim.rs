//! AdamW with decoupled weight decay and two learning-rate groups.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::{Params, VarStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Parameters of `g` and `g'` train at the encoder rate, `h` and `h'` at the decoder rate.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("g.") || name.starts_with("gp.")
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { weight_decay, state: BTreeMap::new() }
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    /// One update of every parameter that received a gradient; the others are left untouched.
    pub fn step(&mut self, params: &VarStore, grads: &GradStore, lr_encoder: f64, lr_decoder: f64) -> Result<()> {
        for (name, var) in params.iter() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let lr = if is_encoder_param(name) { lr_encoder } else { lr_decoder };
            let entry = match self.state.get(name) {
                Some(s) => s.clone(),
                None => Moments { m: grad.zeros_like()?, v: grad.zeros_like()?, steps: 0 },
            };
            let steps = entry.steps + 1;
            let m = ((entry.m * BETA1)? + (grad * (1.0 - BETA1))?)?;
            let v = ((entry.v * BETA2)? + (grad.sqr()? * (1.0 - BETA2))?)?;
            let bc1 = 1.0 - BETA1.powi(steps as i32);
            let bc2 = 1.0 - BETA2.powi(steps as i32);
            let denom = ((v.sqrt()? / bc2.sqrt())? + EPS)?;
            let decayed = (var.as_tensor() * (1.0 - lr * self.weight_decay))?;
            let updated = (decayed - ((&m / denom)? * (lr / bc1))?)?;
            var.set(&updated.detach())?;
            self.state.insert(name.clone(), Moments { m: m.detach(), v: v.detach(), steps });
        }
        Ok(())
    }

    /// Moment tensors under `opt.m/<name>` and `opt.v/<name>`, and per-parameter step counts.
    pub fn export(&self) -> (Vec<(String, Tensor)>, BTreeMap<String, u64>) {
        let mut tensors = Vec::with_capacity(2 * self.state.len());
        let mut steps = BTreeMap::new();
        for (name, s) in &self.state {
            tensors.push((format!("opt.m/{name}"), s.m.clone()));
            tensors.push((format!("opt.v/{name}"), s.v.clone()));
            steps.insert(name.clone(), s.steps);
        }
        (tensors, steps)
    }

    pub fn import(
        weight_decay: f64,
        params: &VarStore,
        tensors: &BTreeMap<String, Tensor>,
        steps: &BTreeMap<String, u64>,
    ) -> Result<Self> {
        let mut state = BTreeMap::new();
        for (name, &count) in steps {
            let shape = params.tensor(name).map_err(|_| Error::Checkpoint(format!("optimizer state for unknown `{name}`")))?.dims().to_vec();
            let get = |kind: &str| {
                let t = tensors
                    .get(&format!("opt.{kind}/{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor opt.{kind}/{name}")))?;
                if t.dims() != shape.as_slice() {
                    return Err(Error::Checkpoint(format!("optimizer tensor for {name} has shape {:?}", t.dims())));
                }
                Ok(t.copy()?)
            };
            state.insert(name.clone(), Moments { m: get("m")?, v: get("v")?, steps: count });
        }
        Ok(Self { weight_decay, state })
    }
}
