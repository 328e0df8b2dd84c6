//! Single-process fog topology simulator.
//!
//! Builds whole clusters on a deterministic virtual clock, runs scripted
//! scenarios and measurement workloads under injected faults, and renders
//! latency/staleness/loss reports. A cluster spec plus a seed fully
//! determines every byte of a run's report.

pub mod cluster;
pub mod convergence;
pub mod measure;
pub mod report;
pub mod scenario;
pub mod serve;
pub mod spec;
pub mod stats;
