//! Experiment runner: configuration, artifact bundles, orchestration.

pub mod config;
pub mod run;
pub mod store;
