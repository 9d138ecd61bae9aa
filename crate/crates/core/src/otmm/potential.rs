use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Mlp;
use crate::numerics::{BoundParams, Graph, ParamSet, Tensor, Var};

pub const POTENTIAL_HIDDEN: usize = 64;

/// Scalar potential `phi`: an MLP `feat_dim -> 64 -> 64 -> 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KantorovichPotential {
    mlp: Mlp,
}

impl KantorovichPotential {
    pub fn new(feat_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            mlp: Mlp::new(&[feat_dim, POTENTIAL_HIDDEN, POTENTIAL_HIDDEN, 1], &mut rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &ParamSet {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.mlp.params_mut()
    }

    /// `phi` of every row of `z`, as an `n x 1` column.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, z: Var) -> Result<Var> {
        self.mlp.forward(g, bound, z)
    }

    pub fn values(&self, z: &Tensor) -> Result<Vec<f64>> {
        Ok(self.mlp.forward_values(z)?.into_values())
    }
}
