use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sbr_lab::data::{self, Dataset, SyntheticTransferSpec};
use sbr_lab::harness::{
    self, selfcheck, HarnessError, SelfCheckOptions, SweepAxis, TrainConfig, CONFIG_KEYS,
};
use sbr_lab::model::{Checkpoint, Model, SourceSnapshot};

/// Transfer-learning experiments with sample-based feature regularization.
///
/// Any config key can be overridden with `--key=value`, e.g. `--beta=3.16e-5`.
#[derive(Parser, Debug)]
#[command(name = "sbr-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic source/target benchmark into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SyntheticTransferSpec::default().seed)]
        data_seed: u64,
    },
    /// Train the source model and write its checkpoint.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fine-tune on the target task and write a JSONL report.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also save the model of the first seed.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Accuracy of a fine-tuned checkpoint on a CSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// One multi-seed run per value of a config axis.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// beta_grid, measure or sampling_rate
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis' standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the identity checks; exits with 2 if any fails.
    Selfcheck {
        /// Momentum for the kappa-equivalence check (the identity needs 0).
        #[arg(long, default_value_t = 0.0)]
        momentum: f64,
    },
    /// Write raw feature-extractor outputs as `label,f0,...`.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const TRAIN_COMMANDS: &[&str] = &["pretrain", "finetune", "sweep"];

/// Splits `--key=value` config overrides of training commands from the
/// arguments clap parses.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let training = args.get(1).is_some_and(|c| TRAIN_COMMANDS.contains(&c.as_str()));
    if !training {
        return (args, Vec::new());
    }
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let parsed = a.strip_prefix("--").and_then(|s| s.split_once('=')).and_then(|(k, v)| {
            let key = k.replace('-', "_");
            (key != "seed" && CONFIG_KEYS.contains(&key.as_str())).then(|| (key, v.to_owned()))
        });
        match parsed {
            Some(kv) => overrides.push(kv),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)], seed: u64) -> Result<TrainConfig, HarnessError> {
    let base = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut cfg = base.apply_overrides(overrides)?;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

struct Bench {
    spec: SyntheticTransferSpec,
    dir: PathBuf,
}

impl Bench {
    fn open(dir: &Path) -> Result<Self, HarnessError> {
        let meta = data::read_metadata(&dir.join("meta.txt")).map_err(|e| io_err(&dir.join("meta.txt"), e))?;
        Ok(Self {
            spec: SyntheticTransferSpec::from_metadata(&meta)?,
            dir: dir.to_owned(),
        })
    }

    fn load(&self, name: &str, classes: usize) -> Result<Dataset, HarnessError> {
        let path = self.dir.join(format!("{name}.csv"));
        data::load_csv(&path, Some(classes)).map_err(|e| match e {
            data::DataError::Io(io) => io_err(&path, io),
            other => other.into(),
        })
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, HarnessError> {
    Checkpoint::load(path).map_err(|e| match e {
        sbr_lab::model::ModelError::Io(io) => io_err(path, io),
        other => other.into(),
    })
}

fn load_dataset(path: &Path, classes: Option<usize>) -> Result<Dataset, HarnessError> {
    data::load_csv(path, classes).map_err(|e| match e {
        data::DataError::Io(io) => io_err(path, io),
        other => other.into(),
    })
}

fn run(command: Command, overrides: &[(String, String)]) -> Result<ExitCode, HarnessError> {
    match command {
        Command::GenData { out, data_seed } => {
            let spec = SyntheticTransferSpec {
                seed: data_seed,
                ..SyntheticTransferSpec::default()
            };
            let bench = data::gen_synthetic_transfer(&spec)?;
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let write = |name: &str, ds: &Dataset| {
                let p = out.join(format!("{name}.csv"));
                data::save_csv(ds, &p).map_err(|e| io_err(&p, e))
            };
            write("source", &bench.source)?;
            write("target_train", &bench.target_train)?;
            write("target_test", &bench.target_test)?;
            let meta = out.join("meta.txt");
            data::write_metadata(&meta, &spec.to_metadata()).map_err(|e| io_err(&meta, e))?;
            println!("wrote benchmark to {}", out.display());
        }
        Command::Pretrain {
            data,
            out,
            seed,
            config,
        } => {
            let cfg = load_config(config.as_deref(), overrides, seed)?;
            let bench = Bench::open(&data)?;
            let source = bench.load("source", bench.spec.source_classes)?;
            let model = harness::pretrain_to_file(&cfg, &source, &out)?;
            let acc = harness::evaluate(&model, &source)?;
            println!("source train accuracy {acc:.4}; wrote {}", out.display());
        }
        Command::Finetune {
            data,
            checkpoint,
            out,
            seed,
            config,
            save_model,
        } => {
            let cfg = load_config(config.as_deref(), overrides, seed)?;
            let bench = Bench::open(&data)?;
            let classes = bench.spec.target_classes;
            let train = bench.load("target_train", classes)?;
            let test = bench.load("target_test", classes)?;
            let source = SourceSnapshot::from_checkpoint(&load_ckpt(&checkpoint)?)?;
            let report = harness::finetune(&cfg, &source, &train, &test)?;
            report.write_jsonl(&out)?;
            if let Some(path) = save_model {
                let (_, model) = harness::finetune_seed(&cfg, &source, &train, &test, cfg.seed)?;
                model.to_checkpoint().save(&path).map_err(|e| io_err(&path, e))?;
            }
            println!(
                "test accuracy {:.4} +- {:.4} over {} seeds",
                report.test_acc_mean,
                report.test_acc_std,
                report.runs.len()
            );
        }
        Command::Eval { checkpoint, data } => {
            let model = Model::from_checkpoint(&load_ckpt(&checkpoint)?)?;
            let ds = load_dataset(&data, Some(model.spec().num_classes))?;
            println!("{:.6}", harness::evaluate(&model, &ds)?);
        }
        Command::Sweep {
            data,
            checkpoint,
            out,
            seed,
            axis,
            values,
            config,
        } => {
            let cfg = load_config(config.as_deref(), overrides, seed)?;
            let axis: SweepAxis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let bench = Bench::open(&data)?;
            let classes = bench.spec.target_classes;
            let train = bench.load("target_train", classes)?;
            let test = bench.load("target_test", classes)?;
            let source = SourceSnapshot::from_checkpoint(&load_ckpt(&checkpoint)?)?;
            let table = harness::sweep(&cfg, axis, &values, &source, &train, &test)?;
            table.write_jsonl(&out)?;
            for c in &table.cells {
                match (&c.error, c.test_acc_mean, c.test_acc_std) {
                    (Some(e), _, _) => println!("{}={}: failed: {e}", axis.key(), c.value),
                    (None, Some(m), Some(s)) => println!("{}={}: {m:.4} +- {s:.4}", axis.key(), c.value),
                    _ => unreachable!("cells carry a result or an error"),
                }
            }
        }
        Command::Selfcheck { momentum } => {
            let report = selfcheck(&SelfCheckOptions {
                momentum,
                ..SelfCheckOptions::default()
            });
            for line in report.lines() {
                println!("{line}");
            }
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::DumpFeatures { checkpoint, data, out } => {
            let snap = SourceSnapshot::from_checkpoint(&load_ckpt(&checkpoint)?)?;
            let ds = load_dataset(&data, None)?;
            let spec = snap.infer_spec(ds.num_classes.max(1))?;
            let model = sbr_lab::model::init_model(&spec, 0, Some(&snap))?;
            harness::dump_features(&model, &ds, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
