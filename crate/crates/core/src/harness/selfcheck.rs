//! Identity checks that must hold on any correct build:
//!
//! 1. tape gradients against finite differences for every primitive and loss;
//! 2. pairwise and center forms of squared-Euclidean SBR agree;
//! 3. the closed-form SBR gradient matches the tape;
//! 4. dividing the feature learning rate by `kappa` equals dividing
//!    `alpha`, `beta` and the feature weight decay by `kappa` (plain SGD);
//! 5. the gradient-reduce layer is an identity forward and scales only the
//!    feature-extractor gradient of the classifier loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::train::{mix_seed, Trainer};
use super::{HarnessError, Method, TrainConfig};
use crate::autodiff::{grad_check, grad_check_with_step, Tape, Tensor, Var};
use crate::data::{self, Dataset, SamplesPerClass, SyntheticTransferSpec};
use crate::losses::{self, LossError, Measure, MeasureKind};
use crate::model::{self, init_model, Activation, Model, ModelSpec, Part, SourceSnapshot};

/// Signature of a pairwise SBR implementation, injectable for mutation tests.
pub type PairwiseFn = fn(&mut Tape, Var, &[usize], Measure) -> Result<Var, LossError>;

#[derive(Clone, Debug)]
pub struct SelfCheckOptions {
    pub pairwise: PairwiseFn,
    /// Momentum used by the kappa-equivalence check.
    pub momentum: f64,
    pub kappa: f64,
    pub equivalence_steps: usize,
    pub random_batches: usize,
    pub seed: u64,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            pairwise: losses::sbr_pairwise,
            momentum: 0.0,
            kappa: 10.0,
            equivalence_steps: 50,
            random_batches: 200,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }
}

pub const GRAD_CHECK: &str = "grad_check";
pub const CENTER_FORM: &str = "center_form";
pub const CLOSED_FORM_GRAD: &str = "closed_form_grad";
pub const KAPPA_EQUIVALENCE: &str = "kappa_equivalence";
pub const GRADIENT_REDUCE: &str = "gradient_reduce";

/// Runs all five checks in order. Errors inside a check count as failures.
pub fn selfcheck(opts: &SelfCheckOptions) -> SelfCheckReport {
    let checks = vec![
        wrap(GRAD_CHECK, check_grad_battery(opts.seed)),
        wrap(CENTER_FORM, check_center_form(opts)),
        wrap(CLOSED_FORM_GRAD, check_closed_form(opts.seed, 50)),
        wrap(KAPPA_EQUIVALENCE, check_kappa(opts)),
        wrap(GRADIENT_REDUCE, check_gradient_reduce(opts.seed)),
    ];
    SelfCheckReport { checks }
}

fn wrap(name: &'static str, r: Result<(bool, String), HarnessError>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).expect("positive dims")
}

/// A random `(features, labels)` batch with at most `max_rows` rows, `max_dim`
/// columns and 10 classes. Roughly a third of batches force a singleton class.
pub fn random_batch(rng: &mut ChaCha8Rng, max_rows: usize, max_dim: usize) -> (Tensor, Vec<usize>) {
    let n = rng.random_range(1..=max_rows);
    let d = rng.random_range(1..=max_dim);
    let c = rng.random_range(1..=10usize);
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    if n > 1 && rng.random_bool(1.0 / 3.0) {
        // a label no other row uses
        labels[0] = c;
    }
    let scale = 0.5 + 2.0 * rng.random::<f64>();
    let mut f = random_tensor(rng, n, d);
    f.data_mut().iter_mut().for_each(|v| *v *= scale);
    (f, labels)
}

fn tape_grad<F>(features: &Tensor, f: F) -> Result<(f64, Vec<f64>), HarnessError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, LossError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone())?;
    let out = f(&mut tape, x)?;
    let v = tape.value(out).item();
    tape.backward(out)?;
    Ok((v, tape.grad(x).expect("backward ran").to_vec()))
}

fn check_grad_battery(seed: u64) -> Result<(bool, String), HarnessError> {
    type Case = (&'static str, Box<dyn Fn(&mut Tape, Var) -> Result<Var, LossError>>, Tensor);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let w = random_tensor(&mut rng, 4, 3);
    let b = Tensor::vector((0..3).map(|_| normal(&mut rng)).collect())?;
    let src = random_tensor(&mut rng, 6, 4);
    let labels = vec![0, 1, 1, 2, 0, 1];
    let x = random_tensor(&mut rng, 6, 4);

    let mut cases: Vec<Case> = vec![
        (
            "matmul_bias_relu",
            Box::new({
                let (w, b) = (w.clone(), b.clone());
                move |t, x| {
                    let wv = t.leaf(w.clone())?;
                    let bv = t.leaf(b.clone())?;
                    let z = t.matmul(x, wv)?;
                    let z = t.bias_add(z, bv)?;
                    let r = t.relu(z)?;
                    Ok(t.squared_l2(r)?)
                }
            }),
            x.clone(),
        ),
        (
            "mul_sub_mean",
            Box::new({
                let src = src.clone();
                move |t, x| {
                    let s = t.leaf(src.clone())?;
                    let m = t.mul(x, s)?;
                    let d = t.sub(m, x)?;
                    let sq = t.squared_l2(d)?;
                    let cm = t.column_means(x)?;
                    let cm = t.row_sums(cm)?;
                    let cm = t.sum(cm)?;
                    let both = t.add(sq, cm)?;
                    Ok(t.scale(both, 0.3)?)
                }
            }),
            x.clone(),
        ),
        (
            "gather_mean",
            Box::new(|t, x| {
                let g = t.gather_rows(x, &[3, 0, 3, 5])?;
                let sq = t.mul(g, g)?;
                Ok(t.mean(sq)?)
            }),
            x.clone(),
        ),
        (
            "cross_entropy",
            Box::new({
                let labels = labels.clone();
                move |t, x| losses::cross_entropy(t, x, &labels)
            }),
            x.clone(),
        ),
        (
            "sbr_center",
            Box::new({
                let labels = labels.clone();
                move |t, x| losses::sbr_center(t, x, &labels)
            }),
            x.clone(),
        ),
        (
            "delta_lite",
            Box::new({
                let src = src.clone();
                move |t, x| losses::delta_lite_reg(t, x, &src)
            }),
            x.clone(),
        ),
    ];
    for kind in MeasureKind::ALL {
        let labels = labels.clone();
        cases.push((
            kind.as_str(),
            Box::new(move |t, x| losses::sbr_pairwise(t, x, &labels, Measure::new(kind))),
            x.clone(),
        ));
    }

    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for (name, f, point) in &cases {
        let r = grad_check(f, point, 1e-5);
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failed.push(format!("{name} ({:.2e})", r.max_rel_error));
        }
    }
    let detail = if failed.is_empty() {
        format!("{} functions, worst relative error {worst:.2e}", cases.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Ok((failed.is_empty(), detail))
}

/// Largest value and gradient gaps between `pairwise` (squared Euclidean) and
/// the center form over `batches` random batches.
pub fn center_form_gaps(pairwise: PairwiseFn, batches: usize, seed: u64) -> Result<(f64, f64), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let measure = Measure::new(MeasureKind::SquaredEuclidean);
    let (mut value_gap, mut grad_gap) = (0.0f64, 0.0f64);
    for _ in 0..batches {
        let (f, labels) = random_batch(&mut rng, 64, 32);
        let (pv, pg) = tape_grad(&f, |t, x| pairwise(t, x, &labels, measure))?;
        let (cv, cg) = tape_grad(&f, |t, x| losses::sbr_center(t, x, &labels))?;
        value_gap = value_gap.max((pv - cv).abs());
        for (a, b) in pg.iter().zip(&cg) {
            grad_gap = grad_gap.max((a - b).abs());
        }
    }
    Ok((value_gap, grad_gap))
}

fn check_center_form(opts: &SelfCheckOptions) -> Result<(bool, String), HarnessError> {
    let (v, g) = center_form_gaps(opts.pairwise, opts.random_batches, opts.seed)?;
    Ok((
        v <= 1e-9 && g <= 1e-9,
        format!("{} batches, value gap {v:.2e}, gradient gap {g:.2e}", opts.random_batches),
    ))
}

/// Largest gap between the tape gradient of the center form and the closed
/// form, and the worst finite-difference relative error, over `batches`
/// random batches.
pub fn closed_form_gaps(seed: u64, batches: usize) -> Result<(f64, f64), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3));
    let (mut closed, mut fd) = (0.0f64, 0.0f64);
    for _ in 0..batches {
        // smaller batches keep the finite-difference sweep cheap
        let (f, labels) = random_batch(&mut rng, 24, 8);
        let (_, g) = tape_grad(&f, |t, x| losses::sbr_center(t, x, &labels))?;
        let cf = losses::sbr_center_closed_form_grad(&f, &labels);
        for (a, b) in g.iter().zip(cf.data()) {
            closed = closed.max((a - b).abs());
        }
        // the center form is quadratic, so central differences are exact up to
        // roundoff and a wider step only shrinks the roundoff
        let r = grad_check_with_step(|t, x| losses::sbr_center(t, x, &labels), &f, 1e-5, 1e-3);
        if let Some(msg) = r.failure {
            return Err(HarnessError::Config(msg));
        }
        fd = fd.max(r.max_rel_error);
    }
    Ok((closed, fd))
}

fn check_closed_form(seed: u64, batches: usize) -> Result<(bool, String), HarnessError> {
    let (closed, fd) = closed_form_gaps(seed, batches)?;
    Ok((
        closed <= 1e-9 && fd <= 1e-5,
        format!("{batches} batches, closed-form gap {closed:.2e}, finite-difference error {fd:.2e}"),
    ))
}

/// Small benchmark and random source used by the lockstep checks.
#[derive(Clone, Debug)]
pub struct TinySetup {
    pub source: SourceSnapshot,
    pub train: Dataset,
}

impl TinySetup {
    pub fn new(seed: u64) -> Result<Self, HarnessError> {
        let spec = SyntheticTransferSpec {
            input_dim: 8,
            source_classes: 4,
            target_classes: 4,
            samples_per_class: SamplesPerClass {
                source: 4,
                target_train: 12,
                target_test: 2,
            },
            seed,
            ..SyntheticTransferSpec::default()
        };
        let bench = data::gen_synthetic_transfer(&spec)?;
        let mspec = ModelSpec {
            input_dim: 8,
            feature_layer_widths: vec![16, 8],
            num_classes: 4,
            activation: Activation::Relu,
        };
        let source = init_model(&mspec, mix_seed(seed, 4), None)?.snapshot();
        Ok(Self {
            source,
            train: bench.target_train,
        })
    }

    /// SBR config sized for the tiny benchmark.
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            feature_layer_widths: vec![16, 8],
            method: Method::Sbr,
            alpha: Some(0.5),
            beta: 0.05,
            kappa: Some(1.0),
            base_lr: 0.05,
            epochs: 40,
            seeds_for_report: 1,
            ..TrainConfig::default()
        }
    }
}

/// Trains two configs in lockstep on identical batches and returns, for each
/// step, the largest elementwise relative gap over the parameters of `part`
/// (all parameters when `None`).
pub fn lockstep_gaps(
    setup: &TinySetup,
    a: &TrainConfig,
    b: &TrainConfig,
    steps: usize,
    part: Option<Part>,
    seed: u64,
) -> Result<Vec<f64>, HarnessError> {
    let mut ta = Trainer::new(a, &setup.source, setup.train.clone(), seed)?;
    let mut tb = Trainer::new(b, &setup.source, setup.train.clone(), seed)?;
    let mut gaps = Vec::with_capacity(steps);
    let mut epoch = 0;
    'outer: loop {
        let batches = ta.epoch_batches(epoch)?;
        if batches != tb.epoch_batches(epoch)? {
            return Err(HarnessError::Config("lockstep runs see different batches".into()));
        }
        for batch in &batches {
            if gaps.len() == steps {
                break 'outer;
            }
            let lr_a = ta.lr_for(epoch)?;
            let lr_b = tb.lr_for(epoch)?;
            ta.train_step(batch, lr_a)?;
            tb.train_step(batch, lr_b)?;
            gaps.push(max_relative_gap(ta.model(), tb.model(), part));
        }
        epoch += 1;
    }
    Ok(gaps)
}

/// Largest `|a - b| / max(|a|, |b|)` over the parameters of `part` (0 where both are 0).
pub fn max_relative_gap(a: &Model, b: &Model, part: Option<Part>) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .filter(|(p, _)| part.is_none_or(|want| p.part == want))
        .flat_map(|(p, q)| p.value.data().iter().zip(q.value.data()))
        .map(|(&x, &y)| {
            let m = x.abs().max(y.abs());
            if m == 0.0 {
                0.0
            } else {
                (x - y).abs() / m
            }
        })
        .fold(0.0, f64::max)
}

/// The two configs whose feature-extractor trajectories coincide under plain SGD:
/// `(lr / kappa, alpha, beta, lambda)` and `(lr, alpha / kappa, beta / kappa, lambda / kappa)`.
pub fn kappa_pair(base: &TrainConfig, kappa: f64) -> (TrainConfig, TrainConfig) {
    let alpha = base.resolved_alpha();
    let lambda = base.resolved_feature_weight_decay();
    let slow_lr = TrainConfig {
        alpha: Some(alpha),
        kappa: Some(kappa),
        feature_weight_decay: Some(lambda),
        ..base.clone()
    };
    let reduced = TrainConfig {
        alpha: Some(alpha / kappa),
        beta: base.beta / kappa,
        kappa: Some(1.0),
        feature_weight_decay: Some(lambda / kappa),
        ..base.clone()
    };
    (slow_lr, reduced)
}

/// Per-step feature-extractor gaps of the kappa-rescaled pair on the tiny benchmark.
pub fn kappa_equivalence_gaps(momentum: f64, kappa: f64, steps: usize, seed: u64) -> Result<Vec<f64>, HarnessError> {
    let setup = TinySetup::new(seed)?;
    let base = TrainConfig {
        momentum,
        ..setup.config()
    };
    let (a, b) = kappa_pair(&base, kappa);
    lockstep_gaps(&setup, &a, &b, steps, Some(Part::Feature), seed)
}

fn check_kappa(opts: &SelfCheckOptions) -> Result<(bool, String), HarnessError> {
    let gaps = kappa_equivalence_gaps(opts.momentum, opts.kappa, opts.equivalence_steps, opts.seed)?;
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    Ok((
        worst <= 1e-9,
        format!(
            "{} steps, kappa {}, momentum {}, worst relative gap {worst:.2e}",
            gaps.len(),
            opts.kappa,
            opts.momentum
        ),
    ))
}

/// Outcome of comparing classifier-loss gradients with and without reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceProbe {
    pub forward_identical: bool,
    /// Largest `|g_f(alpha) - alpha * g_f(1)|`.
    pub feature_gap: f64,
    pub classifier_identical: bool,
}

/// Backpropagates cross-entropy alone through a random model at `alpha` and at 1.
pub fn probe_gradient_reduce(alpha: f64, seed: u64) -> Result<ReduceProbe, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 5));
    let spec = ModelSpec {
        input_dim: 5,
        feature_layer_widths: vec![7, 6],
        num_classes: 3,
        activation: Activation::Relu,
    };
    let m = init_model(&spec, mix_seed(seed, 6), None)?;
    let x = random_tensor(&mut rng, 9, 5);
    let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();

    let run = |a: f64| -> Result<(Tensor, Tensor, Vec<Vec<f64>>), HarnessError> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        let f = bound.forward_features(&mut tape, xv)?;
        let r = model::gradient_reduce(&mut tape, f, a)?;
        let z = bound.forward_logits(&mut tape, r)?;
        let loss = losses::cross_entropy(&mut tape, z, &labels)?;
        tape.backward(loss)?;
        let grads = bound
            .vars
            .iter()
            .map(|&v| tape.grad(v).expect("backward ran").to_vec())
            .collect();
        Ok((tape.value(f).clone(), tape.value(r).clone(), grads))
    };
    let (f, r, g_alpha) = run(alpha)?;
    let (_, _, g_one) = run(1.0)?;
    let forward_identical = f
        .data()
        .iter()
        .zip(r.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let mut feature_gap = 0.0f64;
    let mut classifier_identical = true;
    for (p, (ga, g1)) in m.params().iter().zip(g_alpha.iter().zip(&g_one)) {
        match p.part {
            Part::Feature => {
                for (a, b) in ga.iter().zip(g1) {
                    feature_gap = feature_gap.max((a - alpha * b).abs());
                }
            }
            Part::Classifier => {
                classifier_identical &= ga.iter().zip(g1).all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
    }
    Ok(ReduceProbe {
        forward_identical,
        feature_gap,
        classifier_identical,
    })
}

fn check_gradient_reduce(seed: u64) -> Result<(bool, String), HarnessError> {
    let mut ok = true;
    let mut worst = 0.0f64;
    for alpha in [0.1, 0.37, 1.0] {
        let p = probe_gradient_reduce(alpha, seed)?;
        ok &= p.forward_identical && p.classifier_identical && p.feature_gap <= 1e-12;
        worst = worst.max(p.feature_gap);
    }
    Ok((ok, format!("alphas 0.1, 0.37, 1; worst feature gradient gap {worst:.2e}")))
}
