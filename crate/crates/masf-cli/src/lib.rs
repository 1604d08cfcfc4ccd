//! Experiment harness for measurement-aware score-based filtering: strict
//! TOML configs with dotted-path sweep overrides, reproducible run
//! directories with manifests, sweep execution with failure isolation,
//! result aggregation, and self-checks.

pub mod artifacts;
pub mod config;
pub mod report;
pub mod runner;
pub mod sweep;
pub mod verify;
