//! Named trainable parameters.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

/// Parameters in registration order. Order is part of the checkpoint
/// format, so registration must be deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.params.push(Param::new(value));
        Ok(ParamId(id))
    }

    /// Glorot-uniform initialised `(fan_in, fan_out)` matrix.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }

    /// Rescales gradients so that their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// Plain gradient descent step.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            let grads = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(grads) {
                *v -= lr * g;
            }
        }
    }

    /// Replaces every parameter value with the one of the same name in `other`.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .ok_or_else(|| Error::Input(format!("checkpoint lacks parameter `{name}`")))?;
            let src = &other.params[src.0].value;
            if src.shape() != self.params[i].value.shape() {
                return Err(Error::shape("load_values", self.params[i].value.shape(), src.shape()));
            }
            self.params[i].value = src.clone();
        }
        Ok(())
    }
}
