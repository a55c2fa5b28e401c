//! Experiment orchestration: config files, batch sampling, sweeps, toy
//! panels and the check battery.

pub mod checks;
pub mod config;
pub mod run;
pub mod toy;

pub use checks::{check, CheckItem, CheckReport};
pub use config::{ExperimentConfig, FieldSpec, Overrides};
pub use run::{run_sample, run_sweep, SampleOutput, SweepResult, SweepRow};
pub use toy::{emit_toy_panels, toy_run, ToyRun};
