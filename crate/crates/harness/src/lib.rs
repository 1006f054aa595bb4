//! Experiment harness: configuration, datasets, training runs, suites and
//! the timing probe behind the `toklab` command.

pub mod config;
pub mod data;
pub mod model;
pub mod suite;
pub mod timing;
pub mod train;

pub use config::ExperimentConfig;
pub use data::Dataset;
pub use train::{train, RunOutcome, Status};
