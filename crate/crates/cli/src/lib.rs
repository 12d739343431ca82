//! Library side of the `musc` command: run configuration, pipeline stages
//! and command implementations.

pub mod commands;
pub mod config;
pub mod pipeline;
