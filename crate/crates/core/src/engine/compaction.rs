//! Leveled compaction: job selection and the deduplicating k-way merge.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::sync::Arc;

use crate::config::EngineConfig;
use crate::error::Result;
use crate::sst::Table;
use crate::types::InternalRecord;

use super::version::Version;

pub type Source = Box<dyn Iterator<Item = Result<InternalRecord>> + Send>;

/// Merges sorted sources, yielding only the highest-seq record per key.
pub struct MergeIter {
    sources: Vec<Source>,
    heads: Vec<Option<InternalRecord>>,
    heap: BinaryHeap<Reverse<(u64, Reverse<u64>, usize)>>,
    pending: Option<crate::error::Error>,
    failed: bool,
}

impl MergeIter {
    pub fn new(sources: Vec<Source>) -> Result<Self> {
        let mut m = MergeIter {
            heads: (0..sources.len()).map(|_| None).collect(),
            sources,
            heap: BinaryHeap::new(),
            pending: None,
            failed: false,
        };
        for i in 0..m.sources.len() {
            m.advance(i)?;
        }
        Ok(m)
    }

    fn advance(&mut self, i: usize) -> Result<()> {
        match self.sources[i].next() {
            Some(Ok(r)) => {
                self.heap.push(Reverse((r.key.0, Reverse(r.seq), i)));
                self.heads[i] = Some(r);
            }
            Some(Err(e)) => return Err(e),
            None => self.heads[i] = None,
        }
        Ok(())
    }
}

impl Iterator for MergeIter {
    type Item = Result<InternalRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if let Some(e) = self.pending.take() {
            self.failed = true;
            return Some(Err(e));
        }
        let Reverse((key, _, src)) = self.heap.pop()?;
        let rec = self.heads[src].take().expect("heap entry without head");
        let mut step = self.advance(src);
        while step.is_ok() {
            match self.heap.peek() {
                Some(Reverse((k, _, other))) if *k == key => {
                    let other = *other;
                    self.heap.pop();
                    self.heads[other] = None;
                    step = self.advance(other);
                }
                _ => break,
            }
        }
        if let Err(e) = step {
            self.pending = Some(e);
        }
        Some(Ok(rec))
    }
}

/// Key range covered by `tables`.
pub fn key_range(tables: &[Arc<Table>]) -> (u64, u64) {
    let lo = tables.iter().map(|t| t.min_key()).min().unwrap_or(0);
    let hi = tables.iter().map(|t| t.max_key()).max().unwrap_or(0);
    (lo, hi)
}

pub struct Job {
    pub level: usize,
    pub inputs: Vec<Arc<Table>>,
    pub next: Vec<Arc<Table>>,
    /// No deeper level holds data in the job's range, so tombstones can go.
    pub bottommost: bool,
}

impl Job {
    pub fn output_level(&self) -> usize {
        self.level + 1
    }

    pub fn file_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.inputs.iter().chain(&self.next).map(|t| t.id())
    }

    pub fn input_bytes(&self) -> u64 {
        self.inputs.iter().chain(&self.next).map(|t| t.file_size()).sum()
    }
}

fn make_job(v: &Version, level: usize, inputs: Vec<Arc<Table>>, busy: &HashSet<u64>) -> Option<Job> {
    if inputs.is_empty() || inputs.iter().any(|t| busy.contains(&t.id())) {
        return None;
    }
    let (lo, hi) = key_range(&inputs);
    let next = v.overlapping(level + 1, lo, hi);
    if next.iter().any(|t| busy.contains(&t.id())) {
        return None;
    }
    let (lo, hi) = {
        let (a, b) = key_range(&next);
        if next.is_empty() {
            (lo, hi)
        } else {
            (lo.min(a), hi.max(b))
        }
    };
    let bottommost = (level + 2..v.levels.len()).all(|l| v.overlapping(l, lo, hi).is_empty());
    Some(Job {
        level,
        inputs,
        next,
        bottommost,
    })
}

/// Compacts every file at `level` into `level + 1`.
pub fn whole_level_job(v: &Version, level: usize, busy: &HashSet<u64>) -> Option<Job> {
    if level + 1 >= v.levels.len() {
        return None;
    }
    make_job(v, level, v.files(level).to_vec(), busy)
}

/// Compaction pressure of each level; above 1.0 means compaction is due.
pub fn scores(v: &Version, cfg: &EngineConfig) -> Vec<f64> {
    let n = v.levels.len();
    (0..n - 1)
        .map(|l| {
            if l == 0 {
                v.files(0).len() as f64 / cfg.l0_compaction_trigger as f64
            } else {
                v.level_bytes(l) as f64 / cfg.level_budget(l) as f64
            }
        })
        .collect()
}

/// The most urgent runnable job, avoiding files in `busy`.
pub fn pick(v: &Version, cfg: &EngineConfig, busy: &HashSet<u64>) -> Option<Job> {
    let mut order: Vec<(usize, f64)> = scores(v, cfg).into_iter().enumerate().filter(|&(_, s)| s >= 1.0).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (level, _) in order {
        let job = if level == 0 {
            whole_level_job(v, 0, busy)
        } else {
            // The file that rewrites the fewest next-level bytes per byte.
            let mut best: Option<(f64, Job)> = None;
            for t in v.files(level) {
                if let Some(j) = make_job(v, level, vec![t.clone()], busy) {
                    let overlap: u64 = j.next.iter().map(|t| t.file_size()).sum();
                    let ratio = overlap as f64 / t.file_size().max(1) as f64;
                    if best.as_ref().is_none_or(|(b, _)| ratio < *b) {
                        best = Some((ratio, j));
                    }
                }
            }
            best.map(|(_, j)| j)
        };
        if job.is_some() {
            return job;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::types::UserKey;

    fn src(recs: Vec<InternalRecord>) -> Source {
        Box::new(recs.into_iter().map(Ok))
    }

    #[test]
    fn merge_keeps_newest_version_per_key() {
        let a = vec![
            InternalRecord::put(1u64, 5, b"a5".to_vec()),
            InternalRecord::put(3u64, 1, b"a1".to_vec()),
        ];
        let b = vec![
            InternalRecord::put(1u64, 7, b"b7".to_vec()),
            InternalRecord::delete(2u64, 4),
            InternalRecord::put(3u64, 2, b"b2".to_vec()),
        ];
        let c = vec![InternalRecord::put(2u64, 3, b"c3".to_vec())];
        let out: Vec<_> = MergeIter::new(vec![src(a), src(b), src(c)]).unwrap().map(|r| r.unwrap()).collect();
        let got: Vec<(UserKey, u64)> = out.iter().map(|r| (r.key, r.seq)).collect();
        assert_eq!(got, vec![(UserKey(1), 7), (UserKey(2), 4), (UserKey(3), 2)]);
        assert!(out[1].is_tombstone());
    }

    #[test]
    fn merge_of_nothing_is_empty() {
        assert_eq!(MergeIter::new(vec![]).unwrap().count(), 0);
        assert_eq!(MergeIter::new(vec![src(vec![])]).unwrap().count(), 0);
    }

    #[test]
    fn merge_surfaces_source_errors() {
        let bad: Source = Box::new(
            vec![Ok(InternalRecord::put(1u64, 1, vec![])), Err(Error::ChecksumMismatch("x"))].into_iter(),
        );
        let out: Vec<_> = MergeIter::new(vec![bad]).unwrap().collect();
        assert_eq!(out.len(), 2);
        assert!(out[1].is_err());
    }

    #[test]
    fn merge_matches_oracle_on_random_sources() {
        use rand::{Rng, SeedableRng};
        use std::collections::BTreeMap;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut oracle: BTreeMap<u64, u64> = BTreeMap::new();
        let mut seq = 0;
        let mut sources = Vec::new();
        for _ in 0..6 {
            let mut m = BTreeMap::new();
            for _ in 0..rng.random_range(0..500) {
                seq += 1;
                let k = rng.random_range(0..300u64);
                m.insert(k, seq);
                oracle.insert(k, seq);
            }
            sources.push(src(m.into_iter().map(|(k, s)| InternalRecord::put(k, s, vec![])).collect()));
        }
        let got: Vec<(u64, u64)> = MergeIter::new(sources).unwrap().map(|r| r.unwrap()).map(|r| (r.key.0, r.seq)).collect();
        let want: Vec<(u64, u64)> = oracle.into_iter().collect();
        assert_eq!(got, want);
    }
}
