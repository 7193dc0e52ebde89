//! Transfer-learning lab: a small reverse-mode autodiff engine, an MLP with a
//! gradient-reduce layer, sample-based feature regularization (SBR) and the
//! baselines it is compared against, plus an experiment harness.

pub mod autodiff;
pub mod data;
pub mod harness;
pub mod losses;
pub mod model;
pub mod optim;
