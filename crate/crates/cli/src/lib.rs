//! Experiment configuration, orchestration, replay and conformance checks for
//! the `fedpg` binary.

pub mod config;
pub mod conformance;
pub mod experiment;
pub mod replay;
