//! File formats, parallel execution and the command line for `fosr-core`.

pub mod cli;
pub mod error;
pub mod exec;
pub mod io;
pub mod manifest;
pub mod plot;

pub use error::{CliError, Result};
