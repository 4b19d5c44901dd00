//! Experiment driver: synthetic data, pretraining in the four modes,
//! fine-tuning, evaluation and ablation sweeps.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod pretrain;
pub mod seeds;
pub mod sweep;
pub mod synth;

pub use config::RunConfig;
pub use error::{TrainError, TrainResult};
