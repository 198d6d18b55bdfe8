//! Command-line surface for the re-identification trainer: run
//! configuration, the checkpoint and metrics file formats, gradient
//! verification, and the repeated-seed ablation harness.
//!
//! The binary lives in `main.rs`; everything it does is implemented here so
//! the pieces stay unit-testable. Exit-code policy (owned by
//! [`commands::CliError`]): 0 success, 1 failed verification checks,
//! 2 invalid input or configuration, 3 runtime abort.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
