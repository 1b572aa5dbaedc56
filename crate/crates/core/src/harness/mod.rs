//! Experiment plumbing: configs, data, oracle, reports, checkpoints, runs.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod oracle;
pub mod report;
