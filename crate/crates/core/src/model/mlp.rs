use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, ParamSet, Tensor, Var};

/// Fully connected ReLU network; no activation after the last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    params: ParamSet,
}

fn weight_name(i: usize) -> String {
    format!("layer{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("layer{i}.bias")
}

impl Mlp {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut params = ParamSet::new();
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let values = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            params.insert(weight_name(i), Tensor::matrix(fan_in, fan_out, values)?)?;
            params.insert(bias_name(i), Tensor::zeros(&[1, fan_out]))?;
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn from_params(widths: Vec<usize>, mut params: ParamSet) -> Result<Self> {
        for (i, w) in widths.windows(2).enumerate() {
            let ok = params.get(&weight_name(i)).map(|t| t.dims2()) == Some((w[0], w[1]))
                && params.get(&bias_name(i)).map(|t| t.dims2()) == Some((1, w[1]));
            if !ok {
                return Err(Error::Checkpoint(format!("layer {i} parameters missing or misshapen")));
            }
        }
        params.restore_grads();
        Ok(Self { widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records the forward pass of the rows of `x` on `g`.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "input dimension {cols}, network expects {}",
                self.input_dim()
            )));
        }
        let n_layers = self.widths.len() - 1;
        let mut h = x;
        for i in 0..n_layers {
            let z = g.matmul(h, bound.var(&weight_name(i)))?;
            let z = g.add_row_broadcast(z, bound.var(&bias_name(i)))?;
            h = if i + 1 < n_layers { g.relu(z) } else { z };
        }
        Ok(h)
    }

    /// Forward pass without recording, for inference.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = g.bind(&self.params);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(out).clone())
    }
}
