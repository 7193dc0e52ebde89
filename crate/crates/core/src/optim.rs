//! Grouped SGD with coupled weight decay and cosine-annealed learning rate.

use std::collections::HashMap;

use thiserror::Error;

use crate::model::Model;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("gradient for {name} has {got} entries, expected {expected}")]
    GradientLength { name: String, got: usize, expected: usize },
    #[error("parameter {0} is not covered by exactly one group")]
    Grouping(String),
}

/// `eta_min + (eta_max - eta_min) * (1 + cos(pi * step / total_steps)) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(eta_max: f64, eta_min: f64, total_steps: usize) -> Result<Self, OptimError> {
        if total_steps == 0 {
            return Err(OptimError::EmptySchedule);
        }
        Ok(Self {
            eta_max,
            eta_min,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64, OptimError> {
        if step > self.total_steps {
            return Err(OptimError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        // exact endpoints
        if step == 0 {
            return Ok(self.eta_max);
        }
        if step == self.total_steps {
            return Ok(self.eta_min);
        }
        let t = step as f64 / self.total_steps as f64;
        Ok(self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub names: Vec<String>,
    /// Multiplies the base learning rate.
    pub lr_scale: f64,
    /// Coupled decay: added to the gradient as `weight_decay * w`.
    pub weight_decay: f64,
}

/// Parameter gradients keyed by name.
pub type Grads = HashMap<String, Vec<f64>>;

/// Plain SGD with optional heavy-ball momentum:
///
/// ```text
/// d   = grad + weight_decay * w
/// buf = momentum * buf + d        (buf = d on the first step)
/// w   = w - base_lr * lr_scale * buf
/// ```
///
/// With `momentum == 0` this is exactly `w - lr * (grad + weight_decay * w)`.
#[derive(Clone, Debug)]
pub struct Sgd {
    groups: Vec<ParamGroup>,
    momentum: f64,
    buffers: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, groups: Vec<ParamGroup>, momentum: f64) -> Result<Self, OptimError> {
        for p in model.params() {
            let hits = groups.iter().filter(|g| g.names.contains(&p.name)).count();
            if hits != 1 {
                return Err(OptimError::Grouping(p.name.clone()));
            }
        }
        Ok(Self {
            groups,
            momentum,
            buffers: HashMap::new(),
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step(&mut self, model: &mut Model, grads: &Grads, base_lr: f64) -> Result<(), OptimError> {
        // validate first so a failed step leaves the model untouched
        for g in &self.groups {
            for name in &g.names {
                let grad = grads
                    .get(name)
                    .ok_or_else(|| OptimError::MissingGradient(name.clone()))?;
                let expected = model
                    .param(name)
                    .ok_or_else(|| OptimError::Grouping(name.clone()))?
                    .numel();
                if grad.len() != expected {
                    return Err(OptimError::GradientLength {
                        name: name.clone(),
                        got: grad.len(),
                        expected,
                    });
                }
            }
        }
        for g in &self.groups {
            let lr = base_lr * g.lr_scale;
            for name in &g.names {
                let grad = &grads[name];
                let w = model.param_mut(name).expect("validated").data_mut();
                if self.momentum == 0.0 {
                    if g.weight_decay == 0.0 {
                        for (wi, gi) in w.iter_mut().zip(grad) {
                            *wi -= lr * gi;
                        }
                    } else {
                        for (wi, gi) in w.iter_mut().zip(grad) {
                            *wi -= lr * (gi + g.weight_decay * *wi);
                        }
                    }
                    continue;
                }
                let d: Vec<f64> = w
                    .iter()
                    .zip(grad)
                    .map(|(wi, gi)| gi + g.weight_decay * wi)
                    .collect();
                let buf = self.buffers.entry(name.clone()).or_default();
                if buf.is_empty() {
                    *buf = d;
                } else {
                    for (b, di) in buf.iter_mut().zip(&d) {
                        *b = self.momentum * *b + di;
                    }
                }
                for (wi, b) in w.iter_mut().zip(buf.iter()) {
                    *wi -= lr * b;
                }
            }
        }
        Ok(())
    }
}
