use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};

/// Accuracies of one class-incremental run, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CLRunRecord {
    /// `acc_matrix[i][j]`: accuracy on task `j` after training through task `i`.
    pub acc_matrix: Vec<Vec<f64>>,
    /// Accuracy of the untrained model on each task.
    pub random_init_acc: Vec<f64>,
    /// Accuracy over the whole test set after the last task.
    pub final_acc: f64,
    pub inner_steps: usize,
    pub outer_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClMetrics {
    pub final_acc: f64,
    pub fwt: f64,
    pub bwt: f64,
    pub forgetting: f64,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Forward transfer against the untrained model, backward transfer, and drop
/// from the best earlier accuracy. Empty averages are 0.
pub fn compute_metrics(record: &CLRunRecord) -> Result<ClMetrics> {
    let a = &record.acc_matrix;
    let t = a.len();
    if t == 0 || a.iter().any(|row| row.len() != t) || record.random_init_acc.len() != t {
        return Err(FusionError::Dimension(format!(
            "accuracy matrix must be square with {t} initial accuracies"
        )));
    }
    let last = &a[t - 1];
    let fwt = mean((1..t).map(|j| a[j - 1][j] - record.random_init_acc[j]));
    let bwt = mean((0..t - 1).map(|j| last[j] - a[j][j]));
    let forgetting = mean((0..t - 1).map(|j| {
        let best = (j..t - 1).map(|k| a[k][j]).fold(f64::NEG_INFINITY, f64::max);
        best - last[j]
    }));
    Ok(ClMetrics { final_acc: record.final_acc, fwt, bwt, forgetting })
}

impl CLRunRecord {
    /// One row per after-task checkpoint, one column per evaluated task.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let t = self.acc_matrix.len();
        let mut s = String::from("after_task");
        for j in 0..t {
            s.push_str(&format!(",task_{j}"));
        }
        s.push('\n');
        s.push_str("init");
        for v in &self.random_init_acc {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
        for (i, row) in self.acc_matrix.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| FusionError::io(path, e))
    }

    pub fn write_metrics_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let m = compute_metrics(self)?;
        let json = serde_json::to_string_pretty(&m)?;
        std::fs::write(path, json + "\n").map_err(|e| FusionError::io(path, e))
    }
}
