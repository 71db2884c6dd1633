//! Experiment plumbing around `bro-core`: flat TOML run configs, seeded
//! training and evaluation loops, line-delimited metrics, checkpoints,
//! IQM statistics, ablation presets and SVG/CSV reports.

pub mod ablation;
pub mod checkpoint;
pub mod config;
mod error;
pub mod metrics;
pub mod report;
pub mod run;
pub mod stats;

pub use error::{HarnessError, Result};
