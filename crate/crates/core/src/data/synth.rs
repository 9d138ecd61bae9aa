use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabeledSample;
use crate::error::{Error, Result};

/// A multimodal synthetic classification problem: every class is an
/// equal-weight isotropic Gaussian mixture over its own mode centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub modes_per_class: usize,
    /// `centers[class][mode]`, all of the same dimension.
    pub centers: Vec<Vec<Vec<f64>>>,
    pub scale: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Mode centers drawn uniformly from `[-spread, spread]^dim`, all distinct.
    pub fn random_centers(
        num_classes: usize,
        modes_per_class: usize,
        dim: usize,
        spread: f64,
        scale: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c3a7);
        let centers = (0..num_classes)
            .map(|_| {
                (0..modes_per_class)
                    .map(|_| (0..dim).map(|_| rng.random_range(-spread..=spread)).collect())
                    .collect()
            })
            .collect();
        Self {
            num_classes,
            modes_per_class,
            centers,
            scale,
            samples_per_class,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.centers
            .first()
            .and_then(|c| c.first())
            .map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes_per_class == 0 {
            return Err(Error::Config("modes_per_class must be at least 1".into()));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("invalid mode scale {}", self.scale)));
        }
        if self.centers.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} center groups for {} classes",
                self.centers.len(),
                self.num_classes
            )));
        }
        let dim = self.dim();
        for (c, modes) in self.centers.iter().enumerate() {
            if modes.len() != self.modes_per_class {
                return Err(Error::Config(format!(
                    "class {c} has {} centers, expected {}",
                    modes.len(),
                    self.modes_per_class
                )));
            }
            for (i, m) in modes.iter().enumerate() {
                if m.len() != dim {
                    return Err(Error::Config(format!("class {c} mode {i} has wrong dimension")));
                }
                if modes[..i].iter().any(|o| o == m) {
                    return Err(Error::Config(format!("class {c} has duplicate mode centers")));
                }
            }
        }
        Ok(())
    }
}

/// Draws `samples_per_class` points per class and splits each class 80/20
/// into train and test, in draw order.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_train = spec.samples_per_class * 4 / 5;
    for (class, modes) in spec.centers.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let mode = &modes[rng.random_range(0..modes.len())];
            let features = mode
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.scale * z
                })
                .collect();
            let s = LabeledSample {
                features,
                label: class,
            };
            if i < n_train {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    Ok((train, test))
}
