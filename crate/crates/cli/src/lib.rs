//! Experiment runner for the energy-teleportation simulator: configuration,
//! the run/sweep pipeline, reports and comparison tables.

pub mod compare;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod selftest;

pub use error::{CliError, Result};
