use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::BatchPlan;
use crate::losses::MeasureKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BaselineL2,
    L2sp,
    DeltaLite,
    #[default]
    Sbr,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BaselineL2 => "baseline_l2",
            Self::L2sp => "l2sp",
            Self::DeltaLite => "delta_lite",
            Self::Sbr => "sbr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// `P` classes x `K` samples per batch.
    #[default]
    Stratified,
    /// Shuffled batches of `P * K`; classes without a pair contribute no SBR.
    Uniform,
}

/// Every knob of a fine-tuning run. Unset `alpha`/`kappa` resolve per method:
/// SBR reduces the classifier gradient (`alpha = 0.1`, `kappa = 1`), the
/// baselines reduce the feature-extractor learning rate (`alpha = 1`, `kappa = 10`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub feature_layer_widths: Vec<usize>,
    pub method: Method,
    pub measure: MeasureKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Weight of the SBR term (or of the DELTA-lite term for `delta_lite`).
    pub beta: f64,
    /// Feature-extractor learning rate divisor: `eta_f = base_lr / kappa`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub sp_alpha: f64,
    pub sp_beta: f64,
    pub weight_decay: f64,
    /// Overrides `weight_decay` for the feature-extractor group.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_weight_decay: Option<f64>,
    pub base_lr: f64,
    pub eta_min: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Anneal per optimizer step instead of per epoch.
    pub schedule_per_step: bool,
    pub batching: BatchMode,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub drop_incomplete: bool,
    pub sampling_rate: f64,
    pub seed: u64,
    pub seeds_for_report: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_momentum: f64,
    pub pretrain_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let plan = BatchPlan::default();
        Self {
            feature_layer_widths: vec![64, 32],
            method: Method::Sbr,
            measure: MeasureKind::SquaredEuclidean,
            alpha: None,
            beta: 1e-4,
            kappa: None,
            sp_alpha: 0.01,
            sp_beta: 0.01,
            weight_decay: 1e-4,
            feature_weight_decay: None,
            base_lr: 0.05,
            eta_min: 0.0,
            momentum: 0.0,
            epochs: 200,
            schedule_per_step: false,
            batching: BatchMode::Stratified,
            classes_per_batch: plan.classes_per_batch,
            samples_per_class: plan.samples_per_class,
            drop_incomplete: plan.drop_incomplete,
            sampling_rate: 1.0,
            seed: 0,
            seeds_for_report: 5,
            pretrain_epochs: 30,
            pretrain_lr: 0.05,
            pretrain_momentum: 0.9,
            pretrain_batch_size: 64,
        }
    }
}

/// Keys accepted by [`TrainConfig::apply_overrides`].
pub const CONFIG_KEYS: &[&str] = &[
    "feature_layer_widths",
    "method",
    "measure",
    "alpha",
    "beta",
    "kappa",
    "sp_alpha",
    "sp_beta",
    "weight_decay",
    "feature_weight_decay",
    "base_lr",
    "eta_min",
    "momentum",
    "epochs",
    "schedule_per_step",
    "batching",
    "classes_per_batch",
    "samples_per_class",
    "drop_incomplete",
    "sampling_rate",
    "seed",
    "seeds_for_report",
    "pretrain_epochs",
    "pretrain_lr",
    "pretrain_momentum",
    "pretrain_batch_size",
];

impl TrainConfig {
    /// Conventional fine-tuning: full classifier gradient, feature lr ten times smaller.
    pub fn baseline() -> Self {
        Self {
            method: Method::BaselineL2,
            alpha: Some(1.0),
            beta: 0.0,
            kappa: Some(10.0),
            ..Self::default()
        }
    }

    pub fn sbr(beta: f64) -> Self {
        Self {
            method: Method::Sbr,
            alpha: Some(0.1),
            beta,
            kappa: Some(1.0),
            ..Self::default()
        }
    }

    pub fn resolved_alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.method {
            Method::Sbr => 0.1,
            _ => 1.0,
        })
    }

    pub fn resolved_kappa(&self) -> f64 {
        self.kappa.unwrap_or(match self.method {
            Method::Sbr => 1.0,
            _ => 10.0,
        })
    }

    pub fn resolved_feature_weight_decay(&self) -> f64 {
        self.feature_weight_decay.unwrap_or(self.weight_decay)
    }

    pub fn batch_plan(&self) -> BatchPlan {
        BatchPlan {
            classes_per_batch: self.classes_per_batch,
            samples_per_class: self.samples_per_class,
            drop_incomplete: self.drop_incomplete,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let alpha = self.resolved_alpha();
        if !(alpha > 0.0 && alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {alpha}"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        let kappa = self.resolved_kappa();
        if !(kappa >= 1.0 && kappa.is_finite()) {
            return bad(format!("kappa must be >= 1, got {kappa}"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return bad(format!("sampling_rate must lie in (0, 1], got {}", self.sampling_rate));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.pretrain_momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        for (k, v) in [
            ("weight_decay", self.weight_decay),
            ("feature_weight_decay", self.resolved_feature_weight_decay()),
            ("sp_alpha", self.sp_alpha),
            ("sp_beta", self.sp_beta),
            ("eta_min", self.eta_min),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative, got {v}"));
            }
        }
        if self.epochs == 0 || self.seeds_for_report == 0 {
            return bad("epochs and seeds_for_report must be positive".into());
        }
        if self.classes_per_batch == 0 || self.samples_per_class == 0 {
            return bad("classes_per_batch and samples_per_class must be positive".into());
        }
        if self.method == Method::Sbr && self.batching == BatchMode::Stratified && self.samples_per_class < 2 {
            return bad("SBR needs samples_per_class >= 2 to form pairs".into());
        }
        if self.feature_layer_widths.is_empty() || self.feature_layer_widths.contains(&0) {
            return bad("feature_layer_widths must be non-empty and positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Applies `key=value` overrides. Values use TOML literal syntax; bare
    /// words are taken as strings (`method=sbr`).
    pub fn apply_overrides(&self, overrides: &[(String, String)]) -> Result<Self, HarnessError> {
        let mut table = toml::Table::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(HarnessError::Config(format!("unknown config key {key:?}")));
            }
            let value = match format!("v = {raw}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.clone()),
            };
            table.insert(key.clone(), value);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))
    }
}
