//! On-disk formats: run configuration, checkpoints, dataset layouts.

pub mod checkpoint;
pub mod config;
pub mod dataset;
