//! File formats, run configurations and the command line for `cebra-core`.

pub mod cbrs;
pub mod cli;
pub mod csv_io;
pub mod error;
pub mod model_file;
pub mod parallel;
pub mod run_config;

pub use error::{Error, Result};
