//! Configuration, training orchestration and experiment suites.

pub mod config;
pub mod experiments;
pub mod stats;
pub mod train;

pub use config::{ExperimentConfig, Method};
pub use train::{train, Evaluation, Learner, Policy, RunReport};
