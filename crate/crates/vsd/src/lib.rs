//! File formats, dataset IO and the command-line pipeline around
//! `vsd-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod media;
pub mod rundir;

pub use error::{Error, Result};
