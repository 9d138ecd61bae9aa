//! Feature extractor and aligned-prototype logit head.

mod mlp;

pub use mlp::Mlp;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, ParamSet, Tensor, Var};

pub const DEFAULT_HIDDEN: usize = 400;
pub const DEFAULT_FEAT_DIM: usize = 128;

/// `f_theta`: an MLP `input -> hidden -> hidden -> feat_dim` with ReLU after
/// each hidden layer, optionally followed by scaling every feature vector to
/// unit length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    mlp: Mlp,
    #[serde(default)]
    normalize: bool,
}

/// Added to squared norms before normalizing.
const NORM_FLOOR: f64 = 1e-12;

impl FeatureExtractor {
    pub fn new(input_dim: usize, hidden: usize, feat_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            mlp: Mlp::new(&[input_dim, hidden, hidden, feat_dim], &mut rng)?,
            normalize: false,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp, normalize: false }
    }

    /// Turns unit-length output scaling on or off.
    pub fn with_normalization(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn feat_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn params(&self) -> &ParamSet {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.mlp.params_mut()
    }

    /// Differentiable features of the rows of `x`.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        let h = self.mlp.forward(g, bound, x)?;
        if !self.normalize {
            return Ok(h);
        }
        let sq = g.mul(h, h)?;
        let ones = g.constant(Tensor::matrix(self.feat_dim(), 1, vec![1.0; self.feat_dim()])?);
        let norm2 = g.matmul(sq, ones)?;
        let norm2 = g.add_scalar(norm2, NORM_FLOOR);
        let log_n = g.log(norm2);
        let log_inv = g.scale(log_n, -0.5);
        let inv = g.exp(log_inv);
        g.mul_col_broadcast(h, inv)
    }

    /// Features of a batch of inputs, one row per input.
    pub fn extract_features<R: AsRef<[f64]>>(&self, inputs: &[R]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Ok(Tensor::zeros(&[0, self.feat_dim()]));
        }
        let x = Tensor::from_rows(inputs, self.input_dim())?;
        let mut h = self.mlp.forward_values(&x)?;
        if self.normalize {
            for i in 0..h.rows() {
                let row = h.row_mut(i);
                let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + NORM_FLOOR).sqrt();
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        Ok(h)
    }
}

/// Per-class vectors `w^c` whose inner product with a feature is the class
/// logit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignedPrototypes {
    feat_dim: usize,
    w: BTreeMap<ClassId, Vec<f64>>,
}

impl AlignedPrototypes {
    pub fn new(feat_dim: usize) -> Self {
        Self {
            feat_dim,
            w: BTreeMap::new(),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.w.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn get(&self, c: ClassId) -> Option<&[f64]> {
        self.w.get(&c).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, c: ClassId) -> Option<&mut Vec<f64>> {
        self.w.get_mut(&c)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClassId, &Vec<f64>)> {
        self.w.iter()
    }

    pub fn insert(&mut self, c: ClassId, w: Vec<f64>) -> Result<()> {
        if w.len() != self.feat_dim {
            return Err(Error::Shape(format!(
                "prototype of length {} for feature dimension {}",
                w.len(),
                self.feat_dim
            )));
        }
        if self.w.contains_key(&c) {
            return Err(Error::DuplicateClass(c));
        }
        self.w.insert(c, w);
        Ok(())
    }

    /// Prototypes stacked in ascending class order, `C x feat_dim`.
    pub fn as_matrix(&self) -> Tensor {
        let rows: Vec<&Vec<f64>> = self.w.values().collect();
        Tensor::from_rows(&rows, self.feat_dim).expect("prototype lengths are uniform")
    }
}

/// `<w^c, z>` for every class with a prototype, in ascending class order.
pub fn class_logits(z: &[f64], protos: &AlignedPrototypes, classes: &[ClassId]) -> Result<Vec<f64>> {
    classes
        .iter()
        .map(|&c| {
            let w = protos.get(c).ok_or(Error::MissingPrototype(c))?;
            if w.len() != z.len() {
                return Err(Error::Shape(format!(
                    "feature of length {} against prototype of length {}",
                    z.len(),
                    w.len()
                )));
            }
            Ok(w.iter().zip(z).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Adds `N(0, 0.01 I)` prototypes for unseen classes; existing prototypes are
/// left untouched.
pub fn init_new_classes(protos: &mut AlignedPrototypes, new_classes: &[ClassId], seed: u64) -> Result<()> {
    if let Some(&c) = new_classes
        .iter()
        .enumerate()
        .find(|(i, c)| protos.get(**c).is_some() || new_classes[..*i].contains(c))
        .map(|(_, c)| c)
    {
        return Err(Error::DuplicateClass(c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    for &c in new_classes {
        let w = (0..protos.feat_dim()).map(|_| normal.sample(&mut rng)).collect();
        protos.insert(c, w)?;
    }
    Ok(())
}
