use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{DEFAULT_FEAT_DIM, DEFAULT_HIDDEN};
use crate::otmm::OtmmConfig;
use crate::preservation::PreservationConfig;
use crate::replay::InsertionMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Synth,
}

/// Parameters of the generated multimodal dataset; mode centers are drawn
/// uniformly from `[-spread, spread]^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub modes_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub scale: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            modes_per_class: 4,
            dim: 8,
            spread: 5.0,
            scale: 0.5,
            samples_per_class: 1000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec::random_centers(
            self.num_classes,
            self.modes_per_class,
            self.dim,
            self.spread,
            self.scale,
            self.samples_per_class,
            self.seed,
        )
    }
}

/// Everything a run needs. Loaded from TOML; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// Directory holding the four MNIST IDX files.
    pub mnist_dir: PathBuf,
    pub synth: SynthConfig,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Replay memory capacity in samples.
    pub memory_size: usize,
    pub batch_size: usize,
    /// Centroids per class.
    pub components: usize,
    pub insertion: InsertionMode,
    pub hidden: usize,
    pub feat_dim: usize,
    /// Scale every feature vector to unit length.
    pub normalize_features: bool,
    pub preservation: PreservationConfig,
    pub otmm: OtmmConfig,
    pub seeds: Vec<u64>,
    /// Where metrics, summary and checkpoints go; nothing is written if unset.
    pub output_dir: Option<PathBuf>,
    /// Also evaluate every this many stream batches (0 = task boundaries only).
    pub eval_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            synth: SynthConfig::default(),
            num_tasks: 5,
            classes_per_task: 2,
            memory_size: 1500,
            batch_size: 10,
            components: 4,
            insertion: InsertionMode::Centroid,
            hidden: DEFAULT_HIDDEN,
            feat_dim: DEFAULT_FEAT_DIM,
            normalize_features: false,
            preservation: PreservationConfig::default(),
            otmm: OtmmConfig::default(),
            seeds: vec![0],
            output_dir: None,
            eval_interval: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("components must be at least 1".into()));
        }
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("num_tasks and classes_per_task must be at least 1".into()));
        }
        if self.hidden == 0 || self.feat_dim == 0 {
            return Err(Error::Config("hidden and feat_dim must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.dataset == DatasetKind::Synth
            && self.synth.num_classes != self.num_tasks * self.classes_per_task
        {
            return Err(Error::Config(format!(
                "synthetic dataset has {} classes but {} tasks x {} classes are requested",
                self.synth.num_classes, self.num_tasks, self.classes_per_task
            )));
        }
        self.preservation.validate()?;
        self.otmm.validate()?;
        if self.dataset == DatasetKind::Synth {
            self.synth.spec().validate()?;
        }
        Ok(())
    }
}
