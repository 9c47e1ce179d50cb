//! Command-line pipeline, run configuration and the interactive session
//! server.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod protocol;
pub mod server;

pub use config::RunConfig;
pub use error::{CliError, Result};
