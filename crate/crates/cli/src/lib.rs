//! Batch command runner for the positional-encoding lab.

pub mod commands;
pub mod config;

pub use commands::{run, Command, ConfigErrors, Outcome};
pub use config::{load_config, normalize, parse_override, set_dotted, RunConfig};
