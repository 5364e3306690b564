//! Experiment harness for ensemble embedded meta-learning: configuration,
//! checkpoints, reports and the stage pipeline behind the `eeml` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Preset};
pub use error::HarnessError;
pub use pipeline::Pipeline;
