use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors with a gradient accumulator of identical shape.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    #[serde(skip)]
    grads: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Shape(format!("duplicate parameter name `{name}`")));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let acc = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        if acc.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                acc.len()
            )));
        }
        acc.add_scaled(g, 1.0);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (name, p) in &self.params {
            match self.grads.get_mut(name) {
                Some(g) => g.fill(0.0),
                None => {
                    self.grads.insert(name.clone(), Tensor::zeros(p.shape()));
                }
            }
        }
    }

    /// Euclidean norm of all gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.values_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Ensures each gradient accumulator matches its parameter's shape, which
    /// is not preserved through serialization.
    pub(crate) fn restore_grads(&mut self) {
        self.grads.clear();
        self.zero_grads();
    }

    pub(crate) fn step_raw(&mut self, lr: f64) {
        for (name, p) in self.params.iter_mut() {
            if let Some(g) = self.grads.get_mut(name) {
                for (x, d) in p.values_mut().iter_mut().zip(g.values_mut()) {
                    *x -= lr * *d;
                    *d = 0.0;
                }
            }
        }
    }
}
