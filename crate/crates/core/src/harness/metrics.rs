use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular accuracy matrix: row `i` holds the accuracy on tasks
/// `0..=i` measured right after training task `i` (0-based).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from complete rows; row `i` must have `i + 1` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Shape(format!(
                "accuracy row {} needs {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed rows.
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Accuracy on task `j` after training task `i`, if `j <= i < tasks()`.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }
}

/// Mean accuracy over all tasks after training `t` tasks (1-based count).
pub fn avg_accuracy(acc: &AccMatrix, t: usize) -> Result<f64> {
    if t == 0 || t > acc.tasks() {
        return Err(Error::Data(format!(
            "accuracy row {t} not available ({} rows recorded)",
            acc.tasks()
        )));
    }
    let row = &acc.rows[t - 1];
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean over the first `t - 1` tasks of the gap between the best accuracy
/// seen before the last task and the final accuracy.
pub fn avg_forgetting(acc: &AccMatrix, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::Data("forgetting needs at least two tasks".into()));
    }
    if t > acc.tasks() {
        return Err(Error::Data(format!(
            "accuracy row {t} not available ({} rows recorded)",
            acc.tasks()
        )));
    }
    let last = &acc.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|j| {
            let best = (j..t - 1).map(|l| acc.rows[l][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
