use std::path::Path;
use std::time::Instant;

use super::{EpochRecord, HarnessError, Method, RunReport, SeedRun, TrainConfig};
use crate::autodiff::Tape;
use crate::data::{self, Dataset};
use crate::harness::config::BatchMode;
use crate::losses::{self, Measure};
use crate::model::{self, init_model, Model, ModelSpec, Part, SourceSnapshot};
use crate::optim::{CosineSchedule, Grads, ParamGroup, Sgd};

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64, HarnessError> {
    if ds.is_empty() {
        return Err(HarnessError::Config("cannot evaluate on an empty dataset".into()));
    }
    if ds.input_dim() != model.spec().input_dim {
        return Err(HarnessError::Config(format!(
            "dataset has {} inputs, model expects {}",
            ds.input_dim(),
            model.spec().input_dim
        )));
    }
    let logits = model.logits(&ds.features)?;
    let correct = ds
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Trains feature extractor and source head with cross-entropy and coupled
/// L2 decay on uniformly shuffled batches.
pub fn pretrain(cfg: &TrainConfig, source: &Dataset) -> Result<Model, HarnessError> {
    cfg.validate()?;
    let spec = ModelSpec {
        input_dim: source.input_dim(),
        feature_layer_widths: cfg.feature_layer_widths.clone(),
        num_classes: source.num_classes,
        activation: Default::default(),
    };
    let mut model = init_model(&spec, mix_seed(cfg.seed, 0x5052_4554), None)?;
    let groups = vec![ParamGroup {
        names: model.params().iter().map(|p| p.name.clone()).collect(),
        lr_scale: 1.0,
        weight_decay: cfg.weight_decay,
    }];
    let mut opt = Sgd::new(&model, groups, cfg.pretrain_momentum)?;
    let schedule = CosineSchedule::new(cfg.pretrain_lr, 0.0, cfg.pretrain_epochs.max(1))?;
    let mut tape = Tape::new();
    for epoch in 0..cfg.pretrain_epochs {
        let lr = schedule.lr_at(epoch)?;
        let batches = data::uniform_batches(source.len(), cfg.pretrain_batch_size, mix_seed(cfg.seed, epoch as u64))?;
        for batch in batches {
            let b = source.select(&batch)?;
            tape.reset();
            let bound = model.bind(&mut tape)?;
            let x = tape.leaf(b.features)?;
            let f = bound.forward_features(&mut tape, x)?;
            let z = bound.forward_logits(&mut tape, f)?;
            let loss = losses::cross_entropy(&mut tape, z, &b.labels)?;
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &model, &bound.vars);
            opt.step(&mut model, &grads, lr)?;
        }
    }
    Ok(model)
}

pub fn pretrain_to_file(cfg: &TrainConfig, source: &Dataset, path: &Path) -> Result<Model, HarnessError> {
    let model = pretrain(cfg, source)?;
    model
        .to_checkpoint()
        .save(path)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Ok(model)
}

fn collect_grads(tape: &Tape, model: &Model, vars: &[crate::autodiff::Var]) -> Grads {
    model
        .params()
        .iter()
        .zip(vars)
        .map(|(p, &v)| (p.name.clone(), tape.grad(v).expect("backward ran").to_vec()))
        .collect()
}

/// Losses and accuracy of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub cls: f64,
    pub sbr: f64,
    pub reg: f64,
    pub correct: usize,
    pub count: usize,
}

/// One seed of a fine-tuning run.
pub struct Trainer {
    cfg: TrainConfig,
    alpha: f64,
    measure: Measure,
    model: Model,
    source: SourceSnapshot,
    opt: Sgd,
    train: Dataset,
    seed: u64,
    schedule: CosineSchedule,
    steps_per_epoch: usize,
    step: usize,
    tape: Tape,
}

impl Trainer {
    /// `train` is used as given (no subsampling here).
    pub fn new(cfg: &TrainConfig, source: &SourceSnapshot, train: Dataset, seed: u64) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let spec = source.infer_spec(train.num_classes)?;
        if spec.feature_layer_widths != cfg.feature_layer_widths {
            return Err(HarnessError::Config(format!(
                "config feature widths {:?} differ from checkpoint {:?}",
                cfg.feature_layer_widths, spec.feature_layer_widths
            )));
        }
        if spec.input_dim != train.input_dim() {
            return Err(HarnessError::Config(format!(
                "dataset has {} inputs, checkpoint expects {}",
                train.input_dim(),
                spec.input_dim
            )));
        }
        let alpha = cfg.resolved_alpha();
        let mut model = init_model(&spec, mix_seed(seed, 0x494e_4954), Some(source))?;
        model.set_alpha(alpha)?;
        let names = |part: Part| -> Vec<String> {
            model
                .params()
                .iter()
                .filter(|p| p.part == part)
                .map(|p| p.name.clone())
                .collect()
        };
        let groups = vec![
            ParamGroup {
                names: names(Part::Feature),
                lr_scale: 1.0 / cfg.resolved_kappa(),
                weight_decay: cfg.resolved_feature_weight_decay(),
            },
            ParamGroup {
                names: names(Part::Classifier),
                lr_scale: 1.0,
                weight_decay: cfg.weight_decay,
            },
        ];
        let opt = Sgd::new(&model, groups, cfg.momentum)?;
        let steps_per_epoch = Self::batches_for(cfg, &train, seed, 0)?.len();
        let total = if cfg.schedule_per_step {
            cfg.epochs * steps_per_epoch
        } else {
            cfg.epochs
        };
        let schedule = CosineSchedule::new(cfg.base_lr, cfg.eta_min, total)?;
        Ok(Self {
            cfg: cfg.clone(),
            alpha,
            measure: Measure::new(cfg.measure),
            model,
            source: source.clone(),
            opt,
            train,
            seed,
            schedule,
            steps_per_epoch,
            step: 0,
            tape: Tape::new(),
        })
    }

    fn batches_for(cfg: &TrainConfig, train: &Dataset, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>, HarnessError> {
        let s = mix_seed(seed, 0x4241_5443_0000_0000 ^ epoch as u64);
        Ok(match cfg.batching {
            BatchMode::Stratified => data::stratified_batches(&train.labels, &cfg.batch_plan(), s)?,
            BatchMode::Uniform => data::uniform_batches(train.len(), cfg.batch_plan().batch_size(), s)?,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn epoch_batches(&self, epoch: usize) -> Result<Vec<Vec<usize>>, HarnessError> {
        Self::batches_for(&self.cfg, &self.train, self.seed, epoch)
    }

    pub fn lr_for(&self, epoch: usize) -> Result<f64, HarnessError> {
        let k = if self.cfg.schedule_per_step { self.step } else { epoch };
        Ok(self.schedule.lr_at(k.min(self.schedule.total_steps))?)
    }

    /// Forward, backward and one SGD update on the given example indices.
    pub fn train_step(&mut self, batch: &[usize], lr: f64) -> Result<StepStats, HarnessError> {
        let b = self.train.select(batch)?;
        let tape = &mut self.tape;
        tape.reset();
        let bound = self.model.bind(tape)?;
        let x = tape.leaf(b.features.clone())?;
        let f = bound.forward_features(tape, x)?;

        let sbr = match self.cfg.method {
            Method::Sbr => Some(losses::sbr(tape, f, &b.labels, self.measure)?),
            _ => None,
        };
        let reg = match self.cfg.method {
            Method::L2sp => {
                let feature: Vec<_> = bound
                    .feature_vars()
                    .iter()
                    .zip(&self.source.params)
                    .map(|(&v, (_, t))| (v, t))
                    .collect();
                Some(losses::l2sp_reg(
                    tape,
                    &feature,
                    bound.classifier_vars(),
                    self.cfg.sp_alpha,
                    self.cfg.sp_beta,
                )?)
            }
            Method::DeltaLite => {
                let src = self.source.features(&b.features)?;
                let d = losses::delta_lite_reg(tape, f, &src)?;
                Some(tape.scale(d, self.cfg.beta)?)
            }
            _ => None,
        };

        let reduced = model::gradient_reduce(tape, f, self.alpha)?;
        let logits = bound.forward_logits(tape, reduced)?;
        let cls = losses::cross_entropy(tape, logits, &b.labels)?;
        let beta = if self.cfg.method == Method::Sbr { self.cfg.beta } else { 0.0 };
        let composed = losses::compose_losses(tape, cls, sbr, reg, self.alpha, beta)?;
        tape.backward(composed.objective)?;

        let lt = tape.value(logits);
        let correct = b
            .labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| argmax(lt.row(*i)) == y)
            .count();
        let grads = collect_grads(tape, &self.model, &bound.vars);
        self.opt.step(&mut self.model, &grads, lr)?;
        self.step += 1;
        Ok(StepStats {
            cls: composed.cls,
            sbr: composed.sbr,
            reg: composed.reg,
            correct,
            count: b.len(),
        })
    }

    /// Runs one epoch and evaluates on `test`.
    pub fn run_epoch(&mut self, epoch: usize, test: &Dataset) -> Result<EpochRecord, HarnessError> {
        let batches = self.epoch_batches(epoch)?;
        let epoch_lr = self.lr_for(epoch)?;
        let (mut cls, mut sbr, mut reg) = (0.0, 0.0, 0.0);
        let (mut correct, mut count) = (0, 0);
        for batch in &batches {
            let lr = self.lr_for(epoch)?;
            let s = self.train_step(batch, lr)?;
            cls += s.cls;
            sbr += s.sbr;
            reg += s.reg;
            correct += s.correct;
            count += s.count;
        }
        let n = batches.len() as f64;
        Ok(EpochRecord {
            seed: self.seed,
            epoch,
            lr: epoch_lr,
            train_cls_loss: cls / n,
            train_sbr_loss: sbr / n,
            reg_loss: reg / n,
            train_acc: correct as f64 / count.max(1) as f64,
            test_acc: evaluate(&self.model, test)?,
        })
    }
}

/// Subsamples the training set for `seed`, fine-tunes for `cfg.epochs` and
/// reports every epoch.
pub fn finetune_seed(
    cfg: &TrainConfig,
    source: &SourceSnapshot,
    train_full: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<(SeedRun, Model), HarnessError> {
    let train = data::subsample(train_full, cfg.sampling_rate, mix_seed(seed, 0x5355_4253))?;
    let mut trainer = Trainer::new(cfg, source, train, seed)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        epochs.push(trainer.run_epoch(epoch, test)?);
    }
    let final_test_acc = epochs.last().map_or(0.0, |r| r.test_acc);
    Ok((
        SeedRun {
            seed,
            epochs,
            final_test_acc,
        },
        trainer.into_model(),
    ))
}

/// Fine-tunes `seeds_for_report` seeds (`seed`, `seed + 1`, ...).
pub fn finetune(
    cfg: &TrainConfig,
    source: &SourceSnapshot,
    train_full: &Dataset,
    test: &Dataset,
) -> Result<RunReport, HarnessError> {
    let start = Instant::now();
    let mut runs = Vec::with_capacity(cfg.seeds_for_report);
    for i in 0..cfg.seeds_for_report {
        let (run, _) = finetune_seed(cfg, source, train_full, test, cfg.seed + i as u64)?;
        runs.push(run);
    }
    Ok(RunReport::from_runs(cfg.clone(), runs, start.elapsed().as_secs_f64()))
}

/// Writes raw feature-extractor outputs as `label,f0,...`.
pub fn dump_features(model: &Model, ds: &Dataset, path: &Path) -> Result<(), HarnessError> {
    let f = model.features(&ds.features)?;
    data::write_rows(path, &f, &ds.labels).map_err(|e| match e {
        data::DataError::Io(io) => HarnessError::Io(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

/// Everything a fine-tuning experiment needs besides its config.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub source: SourceSnapshot,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

/// Generates the default synthetic benchmark and pretrains the source model.
pub fn default_experiment() -> Result<Experiment, HarnessError> {
    let spec = data::SyntheticTransferSpec::default();
    let bench = data::gen_synthetic_transfer(&spec)?;
    let cfg = TrainConfig::default();
    let model = pretrain(&cfg, &bench.source)?;
    Ok(Experiment {
        source: model.snapshot(),
        target_train: bench.target_train,
        target_test: bench.target_test,
    })
}
