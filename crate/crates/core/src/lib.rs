//! An LSM-tree key-value engine with learned indexes.
//!
//! The write buffer is an updatable learned index over gapped arrays whose
//! structure can be captured after a flush and reused for later memtables.
//! Each SST carries a compact piecewise-linear model over its block fence
//! keys, so a point lookup reads one contiguous run of at most three blocks.

pub mod config;
pub mod engine;
pub mod error;
pub mod memtable;
pub mod pla;
pub mod skeleton;
pub mod sst;
pub mod types;

pub use config::{EngineConfig, MemtableIndexKind, SkeletonMode, SstIndexKind};
pub use engine::{Engine, EngineStats};
pub use error::{Error, Result};
pub use types::{InternalRecord, OpKind, UserKey};
