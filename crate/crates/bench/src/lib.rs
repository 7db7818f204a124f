//! Benchmark harness for `aeon-core`: synthetic datasets, query workloads,
//! benchmark scenarios, crash injection and the metrics report.

pub mod config;
pub mod crash;
pub mod dataset;
pub mod report;
pub mod stats;
pub mod suite;
pub mod walk;
