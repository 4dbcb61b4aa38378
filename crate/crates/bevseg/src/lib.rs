//! Dataset files, configuration, checkpoints and the `bevseg` command-line
//! tool around [`bevseg_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;

pub use error::{Error, Result};
