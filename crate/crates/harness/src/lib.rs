//! Experiment harness for the `signopt` library: configuration files,
//! presets reproducing the worked examples, and CSV output.

pub mod baseline;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

pub use config::{load_config, save_config, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use experiments::{preset, run_experiment, ExperimentResult};
