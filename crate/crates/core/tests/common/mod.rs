//! Protocol checks shared by the integration test targets.

#![allow(dead_code)]

use std::collections::BTreeSet;

use otcl::data::{gen_synthetic, ClassId, LabeledSample};
use otcl::harness::{evaluate_task, predict, run_seed, Dataset, DatasetKind, RunConfig, RunEvent, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small randomized class-incremental setup.
#[derive(Clone, Debug)]
pub struct StreamCase {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub batch_size: usize,
    pub memory_size: usize,
    pub components: usize,
    pub samples_per_class: usize,
    pub data_seed: u64,
    pub run_seed: u64,
}

impl StreamCase {
    pub fn config(&self) -> RunConfig {
        RunConfig {
            dataset: DatasetKind::Synth,
            synth: SynthConfig {
                num_classes: self.num_tasks * self.classes_per_task,
                modes_per_class: 2,
                dim: 4,
                spread: 4.0,
                scale: 0.5,
                samples_per_class: self.samples_per_class,
                seed: self.data_seed,
            },
            num_tasks: self.num_tasks,
            classes_per_task: self.classes_per_task,
            batch_size: self.batch_size,
            memory_size: self.memory_size,
            components: self.components,
            hidden: 10,
            feat_dim: 5,
            ..Default::default()
        }
    }

    pub fn data(&self) -> Dataset {
        let (train, test) = gen_synthetic(&self.config().synth.spec()).unwrap();
        Dataset { train, test }
    }
}

/// Runs `case` and checks every protocol invariant, returning a description
/// of the first violation.
pub fn check_protocol(case: &StreamCase) -> Result<(), String> {
    let cfg = case.config();
    let data = case.data();
    let class_task = |c: ClassId| c / cfg.classes_per_task;

    let mut consumed = Vec::new();
    let mut violation: Option<String> = None;
    let mut last_task = 0;
    let res = run_seed(&cfg, &data, case.run_seed, &mut |ev| {
        if let RunEvent::Batch {
            task_index,
            stream_indices,
            replay_labels,
            memory_len,
            ..
        } = ev
        {
            if violation.is_some() {
                return Ok(());
            }
            if task_index < last_task {
                violation = Some(format!("task {task_index} revisited after task {last_task}"));
            }
            last_task = task_index;
            if memory_len > cfg.memory_size {
                violation = Some(format!("memory holds {memory_len} > {}", cfg.memory_size));
            }
            if stream_indices.len() > cfg.batch_size {
                violation = Some(format!("batch of {} > {}", stream_indices.len(), cfg.batch_size));
            }
            for &i in stream_indices {
                if class_task(data.train[i].label) != task_index {
                    violation = Some(format!("sample {i} of another task arrived in task {task_index}"));
                }
            }
            if let Some(l) = replay_labels.iter().find(|&&l| class_task(l) >= task_index) {
                violation = Some(format!("replay of class {l} during task {task_index}"));
            }
            consumed.extend_from_slice(stream_indices);
        }
        Ok(())
    })
    .map_err(|e| format!("run failed: {e}"))?;
    if let Some(v) = violation {
        return Err(v);
    }

    // Single pass: every training sample is delivered exactly once.
    let mut sorted = consumed.clone();
    sorted.sort_unstable();
    if sorted != (0..data.train.len()).collect::<Vec<_>>() {
        return Err(format!("{} deliveries for {} training samples", consumed.len(), data.train.len()));
    }

    // The test set never influences training.
    let mut scrambled = data.clone();
    let mut r = ChaCha8Rng::seed_from_u64(case.run_seed ^ 0x5eed);
    let shift = r.random_range(1..=cfg.synth.num_classes);
    for s in &mut scrambled.test {
        for v in &mut s.features {
            *v = r.random_range(-30.0..30.0);
        }
        // A cyclic shift keeps every task populated.
        s.label = (s.label + shift) % cfg.synth.num_classes;
    }
    let other = run_seed(&cfg, &scrambled, case.run_seed, &mut |_| Ok(()))
        .map_err(|e| format!("run on scrambled test set failed: {e}"))?;
    if other.learner != res.learner {
        return Err("test set changed the trained learner".into());
    }

    // Prediction takes no task identity: task accuracy equals the fraction
    // of task-agnostic single-sample predictions that are right, and the
    // predicted class ranges over every class seen.
    let l = &res.learner;
    let seen: BTreeSet<ClassId> = (0..cfg.synth.num_classes).collect();
    for t in 0..cfg.num_tasks {
        let task: Vec<&LabeledSample> = data.test.iter().filter(|s| class_task(s.label) == t).collect();
        let mut right = 0;
        for s in &task {
            let p = predict(&s.features, &l.extractor, &l.otmm).map_err(|e| e.to_string())?;
            if !seen.contains(&p) {
                return Err(format!("predicted unseen class {p}"));
            }
            right += usize::from(p == s.label);
        }
        let a = evaluate_task(&task, &l.extractor, &l.otmm).map_err(|e| e.to_string())?;
        if (a - right as f64 / task.len() as f64).abs() > 1e-12 {
            return Err(format!("task {t} accuracy {a} depends on task context"));
        }
    }
    Ok(())
}
