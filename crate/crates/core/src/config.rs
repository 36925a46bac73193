use std::time::Duration;

use crate::error::{Error, Result};

pub const MIB: usize = 1 << 20;

/// Which index backs the in-memory write buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemtableIndexKind {
    Learned,
    SkipListBaseline,
}

/// Which per-file index is written into SSTs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SstIndexKind {
    PgmFence,
    FenceTableBaseline,
}

/// When to rebuild the memtable skeleton.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SkeletonMode {
    /// Every memtable is built from scratch.
    Off,
    /// The skeleton taken at the first flush is reused forever.
    Single,
    /// Refresh every `skeleton_phi` flushes.
    Periodic,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub memtable_budget_bytes: usize,
    /// Active plus immutable memtables kept in memory.
    pub num_memtables: usize,
    pub block_target_bytes: usize,
    pub sst_target_bytes: usize,
    pub bloom_bits_per_key: u32,
    pub skeleton_phi: u32,
    pub skeleton_mode: SkeletonMode,
    pub epsilon_fence: u32,
    pub compaction_workers: usize,
    pub memtable_index: MemtableIndexKind,
    pub sst_index: SstIndexKind,
    pub direct_io: bool,

    pub wal_enabled: bool,
    /// fsync the WAL on every write instead of leaving it to the OS.
    pub sync_wal: bool,
    pub block_cache_bytes: usize,
    pub l0_compaction_trigger: usize,
    pub level_multiplier: usize,
    /// Size budget of L1; level n holds `level_base_bytes * multiplier^(n-1)`.
    pub level_base_bytes: u64,
    pub max_levels: usize,
    /// Run compactions automatically after flushes.
    pub auto_compaction: bool,
    /// `None` blocks writers indefinitely while the immutable queue is full.
    pub stall_timeout: Option<Duration>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            memtable_budget_bytes: 64 * MIB,
            num_memtables: 2,
            block_target_bytes: 4096 / 3,
            sst_target_bytes: 64 * MIB,
            bloom_bits_per_key: 10,
            skeleton_phi: 10,
            skeleton_mode: SkeletonMode::Periodic,
            epsilon_fence: 1,
            compaction_workers: 8,
            memtable_index: MemtableIndexKind::Learned,
            sst_index: SstIndexKind::PgmFence,
            direct_io: false,
            wal_enabled: true,
            sync_wal: false,
            block_cache_bytes: 32 * MIB,
            l0_compaction_trigger: 4,
            level_multiplier: 10,
            level_base_bytes: 256 * MIB as u64,
            max_levels: 7,
            auto_compaction: true,
            stall_timeout: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.memtable_budget_bytes < MIB {
            return fail("memtable_budget_bytes must be at least 1 MiB");
        }
        if self.epsilon_fence < 1 {
            return fail("epsilon_fence must be at least 1");
        }
        if self.skeleton_phi < 1 {
            return fail("skeleton_phi must be at least 1");
        }
        if self.num_memtables < 2 {
            return fail("num_memtables must be at least 2");
        }
        if self.block_target_bytes < 64 {
            return fail("block_target_bytes must be at least 64");
        }
        if self.sst_target_bytes < self.block_target_bytes {
            return fail("sst_target_bytes must hold at least one block");
        }
        if self.bloom_bits_per_key == 0 {
            return fail("bloom_bits_per_key must be positive");
        }
        if self.compaction_workers == 0 {
            return fail("compaction_workers must be positive");
        }
        if self.l0_compaction_trigger == 0 || self.level_multiplier < 2 {
            return fail("invalid compaction trigger settings");
        }
        if !(2..=32).contains(&self.max_levels) {
            return fail("max_levels must be within 2..=32");
        }
        Ok(())
    }

    /// Size budget of `level` (L0 is governed by file count instead).
    pub fn level_budget(&self, level: usize) -> u64 {
        let mut b = self.level_base_bytes;
        for _ in 1..level {
            b = b.saturating_mul(self.level_multiplier as u64);
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = EngineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.block_target_bytes, 1365);
        assert_eq!(c.skeleton_phi, 10);
        assert_eq!(c.epsilon_fence, 1);
        assert_eq!(c.memtable_budget_bytes, 64 << 20);
    }

    #[test]
    fn invariants_are_enforced() {
        let mut c = EngineConfig::default();
        c.memtable_budget_bytes = MIB - 1;
        assert!(c.validate().is_err());
        let mut c = EngineConfig::default();
        c.epsilon_fence = 0;
        assert!(c.validate().is_err());
        let mut c = EngineConfig::default();
        c.skeleton_phi = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn level_budgets_grow_by_multiplier() {
        let c = EngineConfig {
            level_base_bytes: 100,
            ..Default::default()
        };
        assert_eq!(c.level_budget(1), 100);
        assert_eq!(c.level_budget(3), 10_000);
    }
}
