//! Experiment driver behind the `smd` binary.

pub mod checks;
pub mod commands;
pub mod config;
