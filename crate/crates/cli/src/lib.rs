//! Command-line layer over `rdm_core`: subcommand implementations, flag
//! parsing, exit codes, manifests and heap accounting for benchmarks.

pub mod alloc;
pub mod app;
pub mod commands;
pub mod manifest;

pub use rdm_core;
