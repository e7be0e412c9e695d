//! Configuration, persistence and output for the `krflab` binary.

pub mod commands;
pub mod config;
pub mod snapshot;
pub mod svg;
