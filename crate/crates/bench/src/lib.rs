//! Experiment runner and verification battery for sketched training.

pub mod checks;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod output;
pub mod plot;

pub use error::{BenchError, Result};
