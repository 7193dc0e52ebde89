use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_cls_loss: f64,
    pub train_sbr_loss: f64,
    pub reg_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Test accuracy after the last epoch.
    pub final_test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub runs: Vec<SeedRun>,
    pub test_acc_mean: f64,
    pub test_acc_std: f64,
    pub wall_time_secs: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line<'a> {
    Config { config: &'a TrainConfig },
    Epoch(&'a EpochRecord),
    Final {
        test_acc_mean: f64,
        test_acc_std: f64,
        final_test_acc: Vec<(u64, f64)>,
        wall_time_secs: f64,
    },
}

impl RunReport {
    pub fn from_runs(config: TrainConfig, runs: Vec<SeedRun>, wall_time_secs: f64) -> Self {
        let finals: Vec<f64> = runs.iter().map(|r| r.final_test_acc).collect();
        let (test_acc_mean, test_acc_std) = mean_std(&finals);
        Self {
            config,
            runs,
            test_acc_mean,
            test_acc_std,
            wall_time_secs,
        }
    }

    /// One JSON object per line: the config, every epoch of every seed, then a summary.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![Line::Config {
            config: &self.config,
        }];
        lines.extend(self.runs.iter().flat_map(|r| r.epochs.iter().map(Line::Epoch)));
        lines.push(Line::Final {
            test_acc_mean: self.test_acc_mean,
            test_acc_std: self.test_acc_std,
            final_test_acc: self.runs.iter().map(|r| (r.seed, r.final_test_acc)).collect(),
            wall_time_secs: self.wall_time_secs,
        });
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("report serializes") + "\n")
            .collect()
    }

    /// Metric records only (no wall time), for determinism comparisons.
    pub fn metric_lines(&self) -> Vec<String> {
        self.runs
            .iter()
            .flat_map(|r| r.epochs.iter())
            .map(|e| serde_json::to_string(e).expect("record serializes"))
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), HarnessError> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}
