//! File formats, configuration and subcommands behind the `memstream` binary.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod tensor;
