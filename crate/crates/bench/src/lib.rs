//! Workload generation and benchmarking for the learnkv engine.

pub mod error;
pub mod keys;
pub mod report;
pub mod run;
pub mod workload;

pub use error::{BenchError, Result};
pub use keys::{gen_keys, DistKind, KeyDistribution};
pub use report::{Format, RunReport};
pub use run::{run, run_on};
pub use workload::{Access, OpMix, ValueSize, WorkloadSpec};
