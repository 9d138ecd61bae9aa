use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{avg_accuracy, avg_forgetting, mean_std, AccMatrix, RunConfig, RunEvent, SeedResult};
use crate::checkpoint::Checkpoint;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub tasks_completed: usize,
    /// Average accuracy after the last completed task.
    pub avg_accuracy: Option<f64>,
    /// Average forgetting after the last completed task (needs two tasks).
    pub avg_forgetting: Option<f64>,
    pub acc_matrix: AccMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: RunConfig,
    pub seeds: Vec<SeedSummary>,
    pub mean_avg_accuracy: Option<f64>,
    pub std_avg_accuracy: Option<f64>,
    pub mean_avg_forgetting: Option<f64>,
    pub std_avg_forgetting: Option<f64>,
    pub wall_clock_seconds: f64,
    pub error: Option<String>,
}

impl ExperimentSummary {
    pub fn new(config: RunConfig) -> Self {
        Self {
            config,
            seeds: Vec::new(),
            mean_avg_accuracy: None,
            std_avg_accuracy: None,
            mean_avg_forgetting: None,
            std_avg_forgetting: None,
            wall_clock_seconds: 0.0,
            error: None,
        }
    }

    pub(super) fn push_seed(&mut self, acc: &AccMatrix, seed: u64, elapsed: f64) {
        let t = acc.tasks();
        self.seeds.push(SeedSummary {
            seed,
            tasks_completed: t,
            avg_accuracy: avg_accuracy(acc, t).ok(),
            avg_forgetting: avg_forgetting(acc, t).ok(),
            acc_matrix: acc.clone(),
        });
        let aggregate = |vals: Vec<f64>| {
            if vals.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&vals);
                (Some(m), Some(s))
            }
        };
        (self.mean_avg_accuracy, self.std_avg_accuracy) =
            aggregate(self.seeds.iter().filter_map(|s| s.avg_accuracy).collect());
        (self.mean_avg_forgetting, self.std_avg_forgetting) =
            aggregate(self.seeds.iter().filter_map(|s| s.avg_forgetting).collect());
        self.wall_clock_seconds = elapsed;
    }
}

/// Writes `metrics.csv`, optional `curve.csv`, `summary.json` and one
/// checkpoint per seed into a directory.
pub(super) struct OutputWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    curve: Option<BufWriter<File>>,
}

impl OutputWriter {
    pub(super) fn create(dir: &Path, with_curve: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "seed,task_index,eval_task,accuracy")?;
        metrics.flush()?;
        let curve = if with_curve {
            let mut w = BufWriter::new(File::create(dir.join("curve.csv"))?);
            writeln!(w, "seed,task_index,batch,eval_task,accuracy")?;
            w.flush()?;
            Some(w)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            curve,
        })
    }

    /// Task indices are written 1-based.
    pub(super) fn record(&mut self, seed: u64, ev: &RunEvent<'_>) -> Result<()> {
        match ev {
            RunEvent::TaskRow { task_index, row } => {
                for (j, a) in row.iter().enumerate() {
                    writeln!(self.metrics, "{seed},{},{},{a}", task_index + 1, j + 1)?;
                }
                self.metrics.flush()?;
            }
            RunEvent::Curve(p) => {
                if let Some(w) = self.curve.as_mut() {
                    writeln!(
                        w,
                        "{seed},{},{},{},{}",
                        p.task_index + 1,
                        p.batch,
                        p.eval_task + 1,
                        p.accuracy
                    )?;
                    w.flush()?;
                }
            }
            RunEvent::Batch { .. } => {}
        }
        Ok(())
    }

    pub(super) fn save_checkpoint(&self, cfg: &RunConfig, res: &SeedResult) -> Result<()> {
        let ck = Checkpoint::new(cfg.clone(), res.seed, res.learner.clone());
        ck.save(self.dir.join(format!("checkpoint_seed{}.json", res.seed)))
    }

    pub(super) fn write_summary(&self, summary: &ExperimentSummary) -> Result<()> {
        let text = serde_json::to_string_pretty(summary).map_err(std::io::Error::other)?;
        std::fs::write(self.dir.join("summary.json"), text)?;
        Ok(())
    }
}
