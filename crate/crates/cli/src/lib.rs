//! Experiment orchestration for the metasel toolkit: configuration, the
//! per-subject pipeline, and the gen-data / run / ablate / report commands
//! behind the `msel` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{cmd_ablate, cmd_gen_data, cmd_report, cmd_run};
pub use config::{ExperimentConfig, MethodSpec, Overrides};
pub use error::{CliError, CliResult};
