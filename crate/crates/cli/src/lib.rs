//! Batch front end: scenario files and presets, theory and Monte Carlo
//! sweeps, lambda optimization, GAMP traces and theory/MC comparison.

pub mod compare;
pub mod config;
pub mod error;
pub mod gamp_run;
pub mod mc;
pub mod output;
pub mod theory;

pub use config::{load_spec, spec_from_str, Overrides, SweepSpec};
pub use error::CliError;
pub use output::{Format, Table};
