//! Command-line front end for the discrete diffusion library: configuration,
//! the character-level corpus, checkpoints, training and the five commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod train;

pub use error::{CliError, Result};
