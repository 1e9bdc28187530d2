//! Experiment harness for retrieval-augmented DQN on gridroboman: offline
//! datasets, training, evaluation, ablations and plots. The `r2a` binary
//! exposes each stage as a subcommand.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod generate;
pub mod metrics;
pub mod plot;
pub mod train;

pub use config::ExperimentConfig;
pub use dataset::Dataset;
pub use error::{HarnessError, HarnessResult};
