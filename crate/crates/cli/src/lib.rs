//! Command implementations behind the `fluctoscope` binary.

pub mod commands;
pub mod config;
pub mod report;
