//! Concurrent skip list index, the classic memtable baseline.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

use crossbeam_skiplist::SkipMap;

use super::learned::Upsert;

#[derive(Default)]
pub struct SkipListIndex {
    map: SkipMap<u64, u64>,
    lookups: AtomicU64,
}

impl SkipListIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn upsert(&self, key: u64, seq: u64, handle: u64, seq_of: &dyn Fn(u64) -> u64) -> Upsert {
        let existed = Cell::new(false);
        let entry = self.map.compare_insert(key, handle, |&cur| {
            existed.set(true);
            seq_of(cur) < seq
        });
        match (existed.get(), *entry.value() == handle) {
            (false, _) => Upsert::NewKey,
            (true, true) => Upsert::Replaced,
            (true, false) => Upsert::Stale,
        }
    }

    pub fn get(&self, key: u64) -> Option<u64> {
        self.lookups.fetch_add(1, Relaxed);
        self.map.get(&key).map(|e| *e.value())
    }

    pub fn range(&self, lo: u64, hi: u64, limit: usize) -> Vec<(u64, u64)> {
        if lo > hi {
            return Vec::new();
        }
        self.map.range(lo..=hi).take(limit).map(|e| (*e.key(), *e.value())).collect()
    }

    pub fn entries(&self) -> Vec<(u64, u64)> {
        self.map.iter().map(|e| (*e.key(), *e.value())).collect()
    }

    pub fn lookups(&self) -> u64 {
        self.lookups.load(Relaxed)
    }
}
