//! Command-line surface for the block-state transformer: benchmarks,
//! training, gradient checks, kernel dumps and length generalisation.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod workers;

pub use config::{BenchKind, BenchSettings, RunConfig};
pub use error::{CliError, Result};
