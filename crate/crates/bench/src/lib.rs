//! Synthetic workloads and the measurement harness for intentps.
//!
//! [`workload`] generates per-worker access plans, [`run`] drives them on
//! the simulated cluster under any policy mode, and [`report`] turns the
//! exact counters into CSV and JSON.

pub mod live;
pub mod report;
pub mod run;
pub mod workload;

pub use report::{metrics_csv, metrics_json, MetricsReport, MetricsRow};
pub use run::{run, run_benchmark, sweep_signal_offset, BenchConfig, SweepPoint};
pub use workload::{WorkloadKind, WorkloadSpec};
