//! Experiment configuration and orchestration for the `bass` command-line
//! tool.

pub mod config;
pub mod experiment;
