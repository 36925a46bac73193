//! Immutable snapshots of the SST hierarchy.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::Arc;

use crate::error::Result;
use crate::sst::{Resolved, Table, TableIter};
use crate::types::InternalRecord;

/// Read-path I/O counters aggregated over all tables.
#[derive(Default)]
pub struct ReadCounters {
    pub table_probes: AtomicU64,
    pub bloom_negatives: AtomicU64,
    pub data_reads: AtomicU64,
    pub data_read_bytes: AtomicU64,
    pub middle_hits: AtomicU64,
    pub left_hits: AtomicU64,
    pub right_hits: AtomicU64,
}

#[derive(Clone, Default)]
pub struct Version {
    /// L0 newest first; deeper levels sorted by min key and disjoint.
    pub levels: Vec<Vec<Arc<Table>>>,
}

impl Version {
    pub fn new(max_levels: usize) -> Self {
        Version {
            levels: vec![Vec::new(); max_levels],
        }
    }

    pub fn files(&self, level: usize) -> &[Arc<Table>] {
        &self.levels[level]
    }

    pub fn level_bytes(&self, level: usize) -> u64 {
        self.levels[level].iter().map(|t| t.file_size()).sum()
    }

    pub fn total_files(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn all_tables(&self) -> impl Iterator<Item = &Arc<Table>> {
        self.levels.iter().flatten()
    }

    /// Tables at `level` whose key range intersects `[lo, hi]`.
    pub fn overlapping(&self, level: usize, lo: u64, hi: u64) -> Vec<Arc<Table>> {
        self.levels[level]
            .iter()
            .filter(|t| t.min_key() <= hi && t.max_key() >= lo)
            .cloned()
            .collect()
    }

    fn probe(t: &Table, key: u64, c: &ReadCounters) -> Result<Option<InternalRecord>> {
        c.table_probes.fetch_add(1, Relaxed);
        let (rec, trace) = t.get_traced(key)?;
        if trace.bloom_negative {
            c.bloom_negatives.fetch_add(1, Relaxed);
        }
        c.data_reads.fetch_add(u64::from(trace.reads), Relaxed);
        c.data_read_bytes.fetch_add(trace.read_bytes, Relaxed);
        match trace.resolved {
            Some(Resolved::Middle) => c.middle_hits.fetch_add(1, Relaxed),
            Some(Resolved::Left) => c.left_hits.fetch_add(1, Relaxed),
            Some(Resolved::Right) => c.right_hits.fetch_add(1, Relaxed),
            _ => 0,
        };
        Ok(rec)
    }

    /// Newest record for `key` in the hierarchy, tombstones included.
    pub fn get(&self, key: u64, c: &ReadCounters) -> Result<Option<InternalRecord>> {
        for t in &self.levels[0] {
            if t.min_key() <= key && key <= t.max_key() {
                if let Some(r) = Self::probe(t, key, c)? {
                    return Ok(Some(r));
                }
            }
        }
        for files in &self.levels[1..] {
            let i = files.partition_point(|t| t.max_key() < key);
            if let Some(t) = files.get(i) {
                if t.min_key() <= key {
                    if let Some(r) = Self::probe(t, key, c)? {
                        return Ok(Some(r));
                    }
                }
            }
        }
        Ok(None)
    }

    /// A new version with `removed` file ids dropped and `added` tables
    /// placed.
    pub fn apply(&self, removed: &HashSet<u64>, added: &[(usize, Arc<Table>)]) -> Version {
        let mut levels: Vec<Vec<Arc<Table>>> = self
            .levels
            .iter()
            .map(|l| l.iter().filter(|t| !removed.contains(&t.id())).cloned().collect())
            .collect();
        for (level, t) in added {
            levels[*level].push(t.clone());
        }
        levels[0].sort_by_key(|t| std::cmp::Reverse(t.id()));
        for l in &mut levels[1..] {
            l.sort_by_key(|t| t.min_key());
        }
        Version { levels }
    }

    /// Checks that every level below L0 has pairwise-disjoint key ranges.
    pub fn check_disjoint(&self) -> std::result::Result<(), String> {
        for (level, files) in self.levels.iter().enumerate().skip(1) {
            for w in files.windows(2) {
                if w[0].max_key() >= w[1].min_key() {
                    return Err(format!(
                        "L{level}: file {} [{}, {}] overlaps file {} [{}, {}]",
                        w[0].id(),
                        w[0].min_key(),
                        w[0].max_key(),
                        w[1].id(),
                        w[1].min_key(),
                        w[1].max_key()
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Records with keys in `[lo, hi]` from one sorted, disjoint level, opening
/// each table only once the previous one is exhausted.
pub struct LevelIter {
    tables: Vec<Arc<Table>>,
    next: usize,
    cur: Option<TableIter>,
    lo: u64,
    hi: u64,
    done: bool,
}

impl LevelIter {
    pub fn new(files: &[Arc<Table>], lo: u64, hi: u64) -> Self {
        let start = files.partition_point(|t| t.max_key() < lo);
        let end = files.partition_point(|t| t.min_key() <= hi).max(start);
        LevelIter {
            tables: files[start..end].to_vec(),
            next: 0,
            cur: None,
            lo,
            hi,
            done: false,
        }
    }
}

impl Iterator for LevelIter {
    type Item = Result<InternalRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            if let Some(it) = &mut self.cur {
                match it.next() {
                    Some(Ok(r)) if r.key.0 > self.hi => {
                        self.done = true;
                        return None;
                    }
                    Some(r) => {
                        self.done = r.is_err();
                        return Some(r);
                    }
                    None => self.cur = None,
                }
            }
            let t = self.tables.get(self.next)?;
            self.next += 1;
            match t.iter_from(self.lo) {
                Ok(it) => self.cur = Some(it),
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
    }
}
