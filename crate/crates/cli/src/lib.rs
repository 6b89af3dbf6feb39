//! Batch front end of `channel-fsi`: JSON scenarios, experiments,
//! certificates, CSV tables and SVG plots.

pub mod config;
pub mod plot;
pub mod run;

pub use config::{ConfigError, ExperimentKind, Scenario, ScenarioConfig};
pub use run::{execute, write_outputs, Certificate, Manifest, RunError, RunOutput};
