//! File formats, checkpoints and command implementations around
//! `units-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod manifest;

pub use error::{Result, UnitsError};
