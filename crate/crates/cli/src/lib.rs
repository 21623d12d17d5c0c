//! Experiment harness around `ctclab-core`: dataset generation, training
//! with the criterion family, evaluation, alignment, gradient and oracle
//! verification, and benchmarks — exposed both as a library (for the test
//! suites) and through the `ctclab` binary.

pub mod bench;
pub mod commands;
pub mod config;
pub mod formats;
pub mod gradsuite;
pub mod oraclecmd;
pub mod trainer;
