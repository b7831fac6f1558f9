//! Configuration, datasets and end-to-end workflows behind the `asgm` binary.
//!
//! The workflows are plain functions over a [`RunConfig`], so they can be
//! driven from tests as well as from the command line.

pub mod config;
pub mod data;
pub mod error;
pub mod pipelines;

pub use config::{DataSource, RunConfig, ScoreSource};
pub use error::{CliError, Result};
pub use pipelines::{run, Command};
