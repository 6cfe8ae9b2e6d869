//! Learning-curve experiments for batch active learning: seeded repeated
//! runs of each selection method, aggregated into mean and variance of test
//! accuracy per query count.

pub mod config;
pub mod experiment;

pub use config::{ConfigError, ExperimentConfig, Method};
pub use experiment::{
    load_dataset, run_experiment, run_experiment_on, run_once, run_seed, BatchTiming,
    ExperimentError, ExperimentResult, LearningCurve, RunCurve,
};
