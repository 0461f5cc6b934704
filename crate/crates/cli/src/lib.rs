//! File-based front end for `netgp`: `simulate`, `fit`, `evaluate` and `verify`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{cmd_evaluate, cmd_fit, cmd_simulate, cmd_verify};
pub use config::{load_config, parse_config, render_config, RunConfig};
pub use io::{read_matrix, read_observations};
pub use error::CliError;
