//! Configuration and command implementations behind the `fas` binary.

pub mod commands;
pub mod config;
