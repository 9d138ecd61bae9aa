//! Datasets and single-pass class-incremental task streams.

mod idx;
mod synth;

pub use idx::{decode_idx, encode_idx, load_idx, write_idx, IMAGE_MAGIC, LABEL_MAGIC};
pub use synth::{gen_synthetic, SynthSpec};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: ClassId,
}

/// One task of a stream: its classes and the batches (indices into the
/// training samples) in arrival order.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<ClassId>,
    pub batches: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub batch_size: usize,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Every sample index in arrival order.
    pub fn arrival_order(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks
            .iter()
            .flat_map(|t| t.batches.iter().flat_map(|b| b.iter().copied()))
    }

    /// Index of the task owning `class`.
    pub fn task_of(&self, class: ClassId) -> Option<usize> {
        self.tasks.iter().position(|t| t.classes.contains(&class))
    }
}

/// Splits `samples` into `num_tasks` tasks of `classes_per_task` consecutive
/// labels; each task's samples are shuffled with `seed` and chunked.
pub fn make_split_stream(
    samples: &[LabeledSample],
    num_tasks: usize,
    classes_per_task: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TaskStream> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let classes: BTreeSet<ClassId> = samples.iter().map(|s| s.label).collect();
    let num_classes = classes.iter().next_back().map_or(0, |c| c + 1);
    if num_tasks * classes_per_task != num_classes || classes.len() != num_classes {
        return Err(Error::Data(format!(
            "{num_tasks} tasks x {classes_per_task} classes does not cover the {} labels present (max label {})",
            classes.len(),
            num_classes.saturating_sub(1)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let task_classes: Vec<ClassId> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
        let mut idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| task_classes.contains(&s.label))
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let batches = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
        tasks.push(Task {
            classes: task_classes,
            batches,
        });
    }
    Ok(TaskStream { tasks, batch_size })
}

/// Groups sample indices by the task that owns their label.
pub fn split_by_task(samples: &[LabeledSample], stream: &TaskStream) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); stream.num_tasks()];
    for (i, s) in samples.iter().enumerate() {
        if let Some(t) = stream.task_of(s.label) {
            out[t].push(i);
        }
    }
    out
}
