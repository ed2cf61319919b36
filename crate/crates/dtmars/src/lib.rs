//! Dataset I/O, checkpoints, the experiment pipeline and the CLI built on
//! `dtmars-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{Arm, ExperimentConfig};
pub use error::{PipelineError, Result, Stage};
