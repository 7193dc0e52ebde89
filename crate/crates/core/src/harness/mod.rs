//! Experiment driver: pretraining, fine-tuning, evaluation, sweeps and the
//! identity self-checks.

pub mod config;
pub mod report;
pub mod selfcheck;
pub mod sweep;
pub mod train;

pub use config::{BatchMode, Method, TrainConfig, CONFIG_KEYS};
pub use report::{mean_std, write_atomic, EpochRecord, RunReport, SeedRun};
pub use selfcheck::{selfcheck, CheckResult, SelfCheckOptions, SelfCheckReport};
pub use sweep::{matched_beta, par_map, sweep, SweepAxis, SweepCell, SweepTable};
pub use train::{
    default_experiment, dump_features, evaluate, finetune, finetune_seed, pretrain, pretrain_to_file, Experiment,
    StepStats, Trainer,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::losses::LossError;
use crate::model::ModelError;
use crate::optim::OptimError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl HarnessError {
    /// Process exit code: 1 for usage or configuration problems, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io(_) | Self::Data(DataError::Io(_)) | Self::Model(ModelError::Io(_)) => 3,
            _ => 1,
        }
    }
}
