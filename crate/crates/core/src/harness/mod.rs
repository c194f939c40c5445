//! Run orchestration behind the command-line tool: configuration, data
//! loading, training with checkpoints, evaluation under noise, sweeps,
//! timing and gradient checks.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod sweep;
pub mod train;

pub use config::{Ablation, Precision, RunConfig};
pub use dataset::{DataInfo, Dataset};
pub use train::{evaluate_records, train, train_on, Checkpoint, TrainSummary};
