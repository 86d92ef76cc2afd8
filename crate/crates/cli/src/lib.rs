//! Command-line and HTTP front ends over the stitch memory.

pub mod commands;
pub mod config;
pub mod error;
pub mod health;
pub mod output;
pub mod service;

pub use commands::{run, Cli};
pub use error::{exit_code, UsageError};
