//! Library surface of the `nperf` command-line tool: configuration schema,
//! binary file formats, and the pipeline command implementations. The binary
//! in `main.rs` is a thin argument-parsing shell over [`pipeline`].

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use config::Config;
pub use error::{CliError, Result};
