//! Target network: an MLP feature extractor, a gradient-reduce layer and a
//! single affine classifier head.
//!
//! ```text
//! x --[feature extractor]--> features --[gradient_reduce(alpha)]--> [classifier] --> logits
//!                               |
//!                               +--> feature regularizers (SBR, DELTA-lite)
//! ```
//!
//! Feature regularizers attach to `features`, upstream of the reduce layer,
//! so only the classifier's gradient is scaled by `alpha`.

mod checkpoint;

pub use checkpoint::{Checkpoint, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub const SPEC_HASH_ENTRY: &str = "__spec_hash__";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("alpha must lie in (0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("snapshot does not match model: {0}")]
    Mismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Output widths of the feature layers; the last one is the feature dimension.
    pub feature_layer_widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.feature_layer_widths.is_empty() || self.feature_layer_widths.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "feature_layer_widths must be non-empty and positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.feature_layer_widths.last().expect("validated spec")
    }

    /// Content hash of the feature-extractor part (independent of the head).
    pub fn feature_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(format!("{:?};{};", self.activation, self.input_dim).as_bytes());
        for w in &self.feature_layer_widths {
            h.update(format!("{w},").as_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.input_dim)
            .chain(self.feature_layer_widths.iter().copied())
            .zip(self.feature_layer_widths.iter().copied())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Feature,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub part: Part,
    pub value: Tensor,
}

/// Parameters are stored in forward order: `feature.{i}.weight`,
/// `feature.{i}.bias` for each layer, then `classifier.weight`, `classifier.bias`.
/// Weights are `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    alpha: f64,
}

/// Frozen pretrained feature-extractor parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSnapshot {
    pub params: Vec<(String, Tensor)>,
    pub spec_hash: u64,
}

fn check_alpha(alpha: f64) -> Result<(), ModelError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(ModelError::AlphaOutOfRange(alpha))
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

/// Builds a model. The feature extractor is copied from `source` when given,
/// otherwise He-uniform initialized; the classifier is always freshly drawn.
/// Biases start at zero.
pub fn init_model(spec: &ModelSpec, seed: u64, source: Option<&SourceSnapshot>) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    match source {
        Some(snap) => {
            snap.check_compatible(spec)?;
            for (name, t) in &snap.params {
                params.push(Param {
                    name: name.clone(),
                    part: Part::Feature,
                    value: t.clone(),
                });
            }
        }
        None => {
            for (i, (fan_in, fan_out)) in spec.layer_dims().enumerate() {
                params.push(Param {
                    name: format!("feature.{i}.weight"),
                    part: Part::Feature,
                    value: he_uniform(&mut rng, fan_in, fan_out),
                });
                params.push(Param {
                    name: format!("feature.{i}.bias"),
                    part: Part::Feature,
                    value: Tensor::zeros(vec![fan_out]),
                });
            }
        }
    }
    params.push(Param {
        name: "classifier.weight".into(),
        part: Part::Classifier,
        value: he_uniform(&mut rng, spec.feature_dim(), spec.num_classes),
    });
    params.push(Param {
        name: "classifier.bias".into(),
        part: Part::Classifier,
        value: Tensor::zeros(vec![spec.num_classes]),
    });
    Ok(Model {
        spec: spec.clone(),
        params,
        alpha: 1.0,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<(), ModelError> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn feature_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.part == Part::Feature)
    }

    pub fn classifier_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.part == Part::Classifier)
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel, ModelError> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundModel {
            vars,
            layers: self.spec.feature_layer_widths.len(),
            input_dim: self.spec.input_dim,
        })
    }

    /// Feature-extractor output for a batch, evaluated on a scratch tape.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        let f = bound.forward_features(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        let f = bound.forward_features(&mut tape, xv)?;
        let z = bound.forward_logits(&mut tape, f)?;
        Ok(tape.value(z).clone())
    }

    pub fn snapshot(&self) -> SourceSnapshot {
        SourceSnapshot {
            params: self
                .feature_params()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            spec_hash: self.spec.feature_hash(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        entries.push((SPEC_HASH_ENTRY.into(), encode_hash(self.spec.feature_hash())));
        Checkpoint { entries }
    }

    /// Reconstructs a model, inferring its spec from the stored shapes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let snap = SourceSnapshot::from_checkpoint(ckpt)?;
        let w = ckpt
            .get("classifier.weight")
            .ok_or_else(|| ModelError::Mismatch("checkpoint has no classifier".into()))?;
        if w.rank() != 2 {
            return Err(ModelError::Corrupt("classifier.weight must be rank 2".into()));
        }
        let spec = snap.infer_spec(w.shape()[1])?;
        let mut model = init_model(&spec, 0, Some(&snap))?;
        model.load_checkpoint(ckpt)?;
        Ok(model)
    }

    /// Overwrites every parameter from `ckpt`; names and shapes must match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        if let Some(h) = ckpt.get(SPEC_HASH_ENTRY) {
            let found = decode_hash(h)?;
            if found != self.spec.feature_hash() {
                return Err(ModelError::Mismatch(format!(
                    "spec hash {found:016x} != {:016x}",
                    self.spec.feature_hash()
                )));
            }
        }
        for p in &mut self.params {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| ModelError::Mismatch(format!("missing entry {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(ModelError::Mismatch(format!(
                    "{}: shape {:?} vs {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

impl SourceSnapshot {
    pub fn check_compatible(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        if self.spec_hash != spec.feature_hash() {
            return Err(ModelError::Mismatch(format!(
                "snapshot hash {:016x} does not match spec hash {:016x}",
                self.spec_hash,
                spec.feature_hash()
            )));
        }
        let expected: Vec<(String, Vec<usize>)> = spec
            .layer_dims()
            .enumerate()
            .flat_map(|(i, (a, b))| {
                [
                    (format!("feature.{i}.weight"), vec![a, b]),
                    (format!("feature.{i}.bias"), vec![b]),
                ]
            })
            .collect();
        let found: Vec<(String, Vec<usize>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if expected != found {
            return Err(ModelError::Mismatch(format!(
                "snapshot layout {found:?} does not match spec layout {expected:?}"
            )));
        }
        Ok(())
    }

    /// Model spec whose feature part this snapshot was taken from.
    pub fn infer_spec(&self, num_classes: usize) -> Result<ModelSpec, ModelError> {
        let mut widths = Vec::new();
        let mut input_dim = None;
        for (name, t) in &self.params {
            if name.ends_with(".weight") {
                if t.rank() != 2 {
                    return Err(ModelError::Corrupt(format!("{name} must be rank 2")));
                }
                input_dim.get_or_insert(t.shape()[0]);
                widths.push(t.shape()[1]);
            }
        }
        let spec = ModelSpec {
            input_dim: input_dim.ok_or_else(|| ModelError::Corrupt("no feature layers".into()))?,
            feature_layer_widths: widths,
            num_classes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        self.check_compatible(&spec)?;
        Ok(spec)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let hash = ckpt
            .get(SPEC_HASH_ENTRY)
            .ok_or_else(|| ModelError::Corrupt("missing spec hash entry".into()))?;
        let snap = Self {
            params: ckpt
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with("feature."))
                .cloned()
                .collect(),
            spec_hash: decode_hash(hash)?,
        };
        // validates layout against the hash
        snap.infer_spec(2)?;
        Ok(snap)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = self.params.clone();
        entries.push((SPEC_HASH_ENTRY.into(), encode_hash(self.spec_hash)));
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Output of the frozen feature extractor.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let vars = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let input_dim = self.params.first().map_or(0, |(_, t)| t.shape()[0]);
        let bound = BoundModel {
            layers: vars.len() / 2,
            vars,
            input_dim,
        };
        let xv = tape.leaf(x.clone())?;
        let f = bound.forward_features(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }
}

/// The hash is split into four 16-bit limbs so it survives as exact finite floats.
fn encode_hash(h: u64) -> Tensor {
    let limbs = (0..4).map(|i| ((h >> (16 * i)) & 0xffff) as f64).collect();
    Tensor::vector(limbs).expect("four limbs")
}

fn decode_hash(t: &Tensor) -> Result<u64, ModelError> {
    if t.shape() != [4] {
        return Err(ModelError::Corrupt("spec hash entry must have shape [4]".into()));
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (i, &v)| {
        if v.fract() != 0.0 || !(0.0..65536.0).contains(&v) {
            return Err(ModelError::Corrupt("spec hash limb out of range".into()));
        }
        Ok(acc | ((v as u64) << (16 * i)))
    })
}

/// Model parameters recorded on a tape, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    layers: usize,
    input_dim: usize,
}

impl BoundModel {
    pub fn feature_vars(&self) -> &[Var] {
        &self.vars[..2 * self.layers]
    }

    pub fn classifier_vars(&self) -> &[Var] {
        &self.vars[2 * self.layers..]
    }

    /// Post-activation output of the last feature layer.
    pub fn forward_features(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let xt = tape.value(x);
        if xt.rank() != 2 || xt.cols() != self.input_dim {
            return Err(AutodiffError::ShapeMismatch {
                op: "forward_features",
                left: xt.shape().to_vec(),
                right: vec![xt.rows(), self.input_dim],
            }
            .into());
        }
        let mut h = x;
        for l in 0..self.layers {
            let z = tape.matmul(h, self.vars[2 * l])?;
            let z = tape.bias_add(z, self.vars[2 * l + 1])?;
            h = tape.relu(z)?;
        }
        Ok(h)
    }

    pub fn forward_logits(&self, tape: &mut Tape, features_reduced: Var) -> Result<Var, ModelError> {
        let head = self.classifier_vars();
        let z = tape.matmul(features_reduced, head[0])?;
        Ok(tape.bias_add(z, head[1])?)
    }
}

/// Identity forward; scales the gradient arriving from downstream consumers by `alpha`.
pub fn gradient_reduce(tape: &mut Tape, features: Var, alpha: f64) -> Result<Var, ModelError> {
    check_alpha(alpha)?;
    Ok(tape.grad_scale(features, alpha)?)
}
