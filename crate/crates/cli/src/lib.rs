//! Command-line toolkit over the detection library: dataset plumbing,
//! end-to-end command orchestration, and visualization artifacts.
//!
//! Everything callable from the `mldetect` binary lives here so that
//! integration tests can drive the same code paths in-process.

pub mod commands;
pub mod proposals;
pub mod viz;
