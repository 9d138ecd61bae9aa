//! Online class-incremental training loop, nearest-centroid inference and
//! accuracy bookkeeping.

mod config;
mod metrics;
mod output;

pub use config::{DatasetKind, RunConfig, SynthConfig};
pub use metrics::{avg_accuracy, avg_forgetting, mean_std, AccMatrix};
pub use output::{ExperimentSummary, SeedSummary};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_idx, make_split_stream, split_by_task, ClassId, LabeledSample};
use crate::error::{Error, Result};
use crate::model::{init_new_classes, AlignedPrototypes, FeatureExtractor};
use crate::numerics::{sq_dist, Tensor};
use crate::otmm::{otmm_step, OtmmConfig, OtmmState};
use crate::preservation::dynamic_preservation_step;
use crate::replay::ReplayMemory;
use output::OutputWriter;

/// Rows pushed through the feature extractor at once during evaluation.
const EVAL_CHUNK: usize = 1000;

/// Everything that is learned during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub extractor: FeatureExtractor,
    pub prototypes: AlignedPrototypes,
    pub otmm: OtmmState,
}

impl Learner {
    pub fn new(input_dim: usize, cfg: &RunConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            extractor: FeatureExtractor::new(input_dim, cfg.hidden, cfg.feat_dim, seed)?
                .with_normalization(cfg.normalize_features),
            prototypes: AlignedPrototypes::new(cfg.feat_dim),
            otmm: OtmmState::new(cfg.components)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, |s| s.features.len())
    }
}

/// Loads the MNIST IDX files from `dir` (standard file names).
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let load = |images: &str, labels: &str| {
        let (ip, lp) = (dir.join(images), dir.join(labels));
        for p in [&ip, &lp] {
            if !p.exists() {
                return Err(Error::Data(format!("missing MNIST file {}", p.display())));
            }
        }
        load_idx(ip, lp)
    };
    Ok(Dataset {
        train: load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        test: load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    })
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Mnist => load_mnist(&cfg.mnist_dir),
        DatasetKind::Synth => {
            let (train, test) = gen_synthetic(&cfg.synth.spec())?;
            Ok(Dataset { train, test })
        }
    }
}

/// Class whose nearest centroid is closest to the feature `z`; ties go to
/// the smallest class id.
pub fn nearest_class(z: &[f64], state: &OtmmState) -> Result<ClassId> {
    let mut best: Option<(f64, ClassId)> = None;
    for (&c, mix) in state.mixtures() {
        for k in 0..mix.num_components() {
            let d = sq_dist(z, mix.centroid(k));
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
    }
    best.map(|(_, c)| c).ok_or(Error::NoMixtures)
}

/// Predicted class of the raw input `x`.
pub fn predict(x: &[f64], extractor: &FeatureExtractor, state: &OtmmState) -> Result<ClassId> {
    let z = extractor.extract_features(&[x])?;
    nearest_class(z.row(0), state)
}

/// Predicted classes of many inputs.
pub fn predict_batch<R: AsRef<[f64]>>(
    inputs: &[R],
    extractor: &FeatureExtractor,
    state: &OtmmState,
) -> Result<Vec<ClassId>> {
    if state.mixtures().is_empty() {
        return Err(Error::NoMixtures);
    }
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let z = extractor.extract_features(chunk)?;
        for i in 0..z.rows() {
            out.push(nearest_class(z.row(i), state)?);
        }
    }
    Ok(out)
}

/// Fraction of `test` classified correctly.
pub fn evaluate_task(test: &[&LabeledSample], extractor: &FeatureExtractor, state: &OtmmState) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let inputs: Vec<&[f64]> = test.iter().map(|s| s.features.as_slice()).collect();
    let preds = predict_batch(&inputs, extractor, state)?;
    let correct = preds.iter().zip(test).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Accuracy on task `eval_task` after `batch` stream batches of task
/// `task_index` (all 0-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub task_index: usize,
    pub batch: usize,
    pub eval_task: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub acc: AccMatrix,
    pub curve: Vec<CurvePoint>,
    pub learner: Learner,
}

impl SeedResult {
    pub fn avg_accuracy(&self) -> Result<f64> {
        avg_accuracy(&self.acc, self.acc.tasks())
    }

    /// `None` for single-task runs.
    pub fn avg_forgetting(&self) -> Option<f64> {
        avg_forgetting(&self.acc, self.acc.tasks()).ok()
    }
}

/// Progress notifications from [`run_seed`].
pub enum RunEvent<'a> {
    /// Accuracy row recorded after training task `task_index`.
    TaskRow { task_index: usize, row: &'a [f64] },
    Curve(&'a CurvePoint),
    /// A stream batch has been consumed. `stream_indices` index the training
    /// samples of the batch; `memory_len` is the store size afterwards.
    Batch {
        task_index: usize,
        batch: usize,
        stream_indices: &'a [usize],
        replay_labels: &'a [ClassId],
        memory_len: usize,
    },
}

/// Independent sub-seed for one component of a run.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn evaluate_seen(
    tasks_seen: usize,
    test_by_task: &[Vec<&LabeledSample>],
    learner: &Learner,
) -> Result<Vec<f64>> {
    test_by_task[..tasks_seen]
        .iter()
        .map(|t| evaluate_task(t, &learner.extractor, &learner.otmm))
        .collect()
}

/// Trains one learner on the class-incremental stream built from
/// `data.train`, evaluating on `data.test` after every task.
///
/// Each stream batch `X` is processed once: a replay batch is drawn from
/// memory (excluding the current task's classes), dynamic preservation runs
/// on both, the class mixtures are fitted on the updated features of both,
/// and samples of `X` close to their class centroids enter memory.
pub fn run_seed(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
    on_event: &mut dyn FnMut(RunEvent<'_>) -> Result<()>,
) -> Result<SeedResult> {
    cfg.validate()?;
    let stream = make_split_stream(&data.train, cfg.num_tasks, cfg.classes_per_task, cfg.batch_size, seed)?;
    let test_by_task: Vec<Vec<&LabeledSample>> = split_by_task(&data.test, &stream)
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| &data.test[i]).collect())
        .collect();
    if let Some(t) = test_by_task.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("task {t} has no test samples")));
    }

    let mut learner = Learner::new(data.input_dim(), cfg, derive_seed(seed, 1))?;
    let mut memory = ReplayMemory::new(cfg.memory_size, cfg.insertion, derive_seed(seed, 3))?;
    let otmm_cfg = OtmmConfig {
        seed: derive_seed(seed, cfg.otmm.seed),
        ..cfg.otmm.clone()
    };
    let mut otmm_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let mut acc = AccMatrix::new();
    let mut curve = Vec::new();
    let mut seen: BTreeSet<ClassId> = BTreeSet::new();

    for (t, task) in stream.tasks.iter().enumerate() {
        let current: BTreeSet<ClassId> = task.classes.iter().copied().collect();
        let fresh: Vec<ClassId> = task
            .classes
            .iter()
            .copied()
            .filter(|c| learner.prototypes.get(*c).is_none())
            .collect();
        init_new_classes(&mut learner.prototypes, &fresh, derive_seed(seed, 100 + t as u64))?;
        let old: BTreeSet<ClassId> = seen.difference(&current).copied().collect();
        seen.extend(current.iter().copied());
        memory.rebalance_quotas(seen.len());

        for (b, idx) in task.batches.iter().enumerate() {
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &data.train[i]).collect();
            let replay = memory.sample_replay_batch_from(cfg.batch_size, &current);
            let replay_refs: Vec<&LabeledSample> = replay.iter().collect();
            dynamic_preservation_step(
                &batch,
                &replay_refs,
                &mut learner.extractor,
                &mut learner.prototypes,
                &old,
                &cfg.preservation,
            )?;

            let all: Vec<&LabeledSample> = batch.iter().chain(&replay_refs).copied().collect();
            let inputs: Vec<&[f64]> = all.iter().map(|s| s.features.as_slice()).collect();
            let z = learner.extractor.extract_features(&inputs)?;
            let mut rows_by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
            for (i, s) in all.iter().enumerate() {
                rows_by_class.entry(s.label).or_default().push(i);
            }
            let per_class: BTreeMap<ClassId, Tensor> = rows_by_class
                .iter()
                .map(|(&c, rows)| {
                    let r: Vec<&[f64]> = rows.iter().map(|&i| z.row(i)).collect();
                    Tensor::from_rows(&r, z.cols()).map(|m| (c, m))
                })
                .collect::<Result<_>>()?;
            otmm_step(&per_class, &mut learner.otmm, &otmm_cfg, &mut otmm_rng)?;

            for (&c, rows) in &rows_by_class {
                let stream_rows: Vec<usize> = rows.iter().copied().filter(|&i| i < batch.len()).collect();
                if stream_rows.is_empty() {
                    continue;
                }
                let samples: Vec<&LabeledSample> = stream_rows.iter().map(|&i| all[i]).collect();
                let feats: Vec<&[f64]> = stream_rows.iter().map(|&i| z.row(i)).collect();
                let feats = Tensor::from_rows(&feats, z.cols())?;
                let per_centroid = memory.default_per_centroid(c, cfg.components);
                let centroids = learner.otmm.mixture(c).map(|m| m.mu());
                memory.insert_with_centroids(c, &samples, &feats, centroids, per_centroid)?;
            }
            on_event(RunEvent::Batch {
                task_index: t,
                batch: b,
                stream_indices: idx,
                replay_labels: &replay.iter().map(|s| s.label).collect::<Vec<_>>(),
                memory_len: memory.len(),
            })?;

            if cfg.eval_interval > 0 && (b + 1) % cfg.eval_interval == 0 {
                for (j, a) in evaluate_seen(t + 1, &test_by_task, &learner)?.into_iter().enumerate() {
                    let p = CurvePoint {
                        task_index: t,
                        batch: b + 1,
                        eval_task: j,
                        accuracy: a,
                    };
                    on_event(RunEvent::Curve(&p))?;
                    curve.push(p);
                }
            }
        }

        let row = evaluate_seen(t + 1, &test_by_task, &learner)?;
        on_event(RunEvent::TaskRow {
            task_index: t,
            row: &row,
        })?;
        acc.push_row(row)?;
    }

    Ok(SeedResult {
        seed,
        acc,
        curve,
        learner,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub summary: ExperimentSummary,
    pub results: Vec<SeedResult>,
}

/// Runs every seed of `cfg` on already loaded data, writing outputs to
/// `cfg.output_dir` when set. Metrics rows are flushed as they are produced,
/// and a summary with the error is written if a seed fails.
pub fn run_experiment_on(cfg: &RunConfig, data: &Dataset) -> Result<Experiment> {
    run_experiment_with(cfg, data, &mut |_, _| {})
}

/// [`run_experiment_on`] with a progress callback receiving the seed and
/// every event.
pub fn run_experiment_with(
    cfg: &RunConfig,
    data: &Dataset,
    progress: &mut dyn FnMut(u64, &RunEvent<'_>),
) -> Result<Experiment> {
    cfg.validate()?;
    let start = Instant::now();
    let mut writer = match &cfg.output_dir {
        Some(dir) => Some(OutputWriter::create(dir, cfg.eval_interval > 0)?),
        None => None,
    };
    let mut summary = ExperimentSummary::new(cfg.clone());
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut partial = AccMatrix::new();
        let outcome = run_seed(cfg, data, seed, &mut |ev| {
            progress(seed, &ev);
            if let RunEvent::TaskRow { row, .. } = &ev {
                partial.push_row(row.to_vec())?;
            }
            match writer.as_mut() {
                Some(w) => w.record(seed, &ev),
                None => Ok(()),
            }
        });
        match outcome {
            Ok(res) => {
                summary.push_seed(&res.acc, seed, start.elapsed().as_secs_f64());
                if let Some(w) = writer.as_mut() {
                    w.save_checkpoint(cfg, &res)?;
                }
                results.push(res);
            }
            Err(e) => {
                summary.push_seed(&partial, seed, start.elapsed().as_secs_f64());
                summary.error = Some(e.to_string());
                if let Some(w) = writer.as_mut() {
                    w.write_summary(&summary)?;
                }
                return Err(e);
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.write_summary(&summary)?;
    }
    Ok(Experiment { summary, results })
}

/// Loads the configured dataset and runs every seed.
pub fn run_experiment(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    run_experiment_on(cfg, &data)
}

#[cfg(test)]
mod tests;
