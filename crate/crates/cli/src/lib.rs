//! Command-line experiments on path-sparse networks: TOML configs in,
//! containers and CSV files out.

pub mod analyze;
pub mod config;
pub mod error;
pub mod run;
pub mod sobol;

pub use config::ExperimentConfig;
pub use error::Failure;
