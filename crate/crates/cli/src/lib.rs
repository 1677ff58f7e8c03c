//! Experiment harness for the metabalance toolkit: configuration, the
//! training loop, validation sweeps, magnitude tracing, and benchmarks.

#![forbid(unsafe_code)]

pub mod bench;
pub mod config;
pub mod run;
pub mod sweep;

pub use config::{ExperimentConfig, MethodConfig, Overrides};
pub use run::{
    derive_seed, prepare_dataset, train, train_instrumented, train_on, PreparedData, RunRecord,
    TrainOutcome, TrainPhase,
};
pub use sweep::{median, sweep, SweepOutcome};
