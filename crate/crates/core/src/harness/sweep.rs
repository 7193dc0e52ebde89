use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::{finetune, write_atomic, HarnessError, RunReport, TrainConfig};
use crate::data::Dataset;
use crate::losses::{self, Measure, MeasureKind};
use crate::model::SourceSnapshot;

/// Environment variable capping the number of parallel sweep workers.
pub const THREADS_ENV: &str = "SBR_LAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BetaGrid,
    Measure,
    SamplingRate,
}

impl SweepAxis {
    /// The config key each axis overrides.
    pub fn key(self) -> &'static str {
        match self {
            Self::BetaGrid => "beta",
            Self::Measure => "measure",
            Self::SamplingRate => "sampling_rate",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BetaGrid => "beta_grid",
            Self::Measure => "measure",
            Self::SamplingRate => "sampling_rate",
        }
    }

    /// The grid used when no values are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::BetaGrid => &["1e-5", "3.16e-5", "1e-4"],
            Self::Measure => &["squared_euclidean", "neg_cosine", "neg_inner"],
            Self::SamplingRate => &["0.15", "0.3", "0.5", "1.0"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    fn sort_key(self, value: &str) -> f64 {
        match self {
            Self::Measure => MeasureKind::from_str(value)
                .ok()
                .and_then(|k| MeasureKind::ALL.iter().position(|&m| m == k))
                .map_or(f64::INFINITY, |i| i as f64),
            _ => value.parse().unwrap_or(f64::INFINITY),
        }
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "beta_grid" | "beta" => Ok(Self::BetaGrid),
            "measure" => Ok(Self::Measure),
            "sampling_rate" => Ok(Self::SamplingRate),
            other => Err(HarnessError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub value: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub report: Option<RunReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, value: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.value == value)
    }

    /// One summary object per cell.
    pub fn to_jsonl(&self) -> String {
        self.cells
            .iter()
            .map(|c| {
                let mut v = serde_json::to_value(c).expect("cell serializes");
                v["axis"] = self.axis.as_str().into();
                v.to_string() + "\n"
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), HarnessError> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

/// Rescales `beta`, tuned for squared Euclidean SBR, to `measure` so both
/// regularizers start fine-tuning at the same magnitude on the source features
/// of `train`.
pub fn matched_beta(beta: f64, measure: MeasureKind, source: &SourceSnapshot, train: &Dataset) -> Result<f64, HarnessError> {
    let f = source.features(&train.features)?;
    let reference = losses::sbr_value(&f, &train.labels, Measure::new(MeasureKind::SquaredEuclidean))?;
    let own = losses::sbr_value(&f, &train.labels, Measure::new(measure))?;
    if own == 0.0 || !own.is_finite() {
        return Err(HarnessError::Config(format!(
            "{} SBR vanishes on these features; cannot match scales",
            measure.as_str()
        )));
    }
    Ok(beta * reference.abs() / own.abs())
}

/// Worker count from [`THREADS_ENV`], or rayon's default when unset.
pub fn worker_threads() -> Result<usize, HarnessError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(HarnessError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

/// Runs `f` over `items` on a pool sized by [`worker_threads`], preserving order.
pub fn par_map<T, R, F>(items: Vec<T>, f: F) -> Result<Vec<R>, HarnessError>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads()?)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(pool.install(|| items.into_par_iter().map(f).collect()))
}

/// One multi-seed fine-tuning run per axis value. Cells that fail keep their
/// error message instead of aborting the sweep; the table is sorted by value.
pub fn sweep(
    template: &TrainConfig,
    axis: SweepAxis,
    values: &[String],
    source: &SourceSnapshot,
    train: &Dataset,
    test: &Dataset,
) -> Result<SweepTable, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let mut cells = par_map(values.to_vec(), |value| {
        let run = template
            .apply_overrides(&[(axis.key().to_string(), value.clone())])
            .and_then(|cfg| finetune(&cfg, source, train, test));
        match run {
            Ok(r) => SweepCell {
                value,
                test_acc_mean: Some(r.test_acc_mean),
                test_acc_std: Some(r.test_acc_std),
                error: None,
                report: Some(r),
            },
            Err(e) => SweepCell {
                value,
                test_acc_mean: None,
                test_acc_std: None,
                error: Some(e.to_string()),
                report: None,
            },
        }
    })?;
    cells.sort_by(|a, b| axis.sort_key(&a.value).total_cmp(&axis.sort_key(&b.value)));
    Ok(SweepTable { axis, cells })
}
