//! The in-memory write buffer: an arena of encoded records plus an index
//! mapping each user key to its newest record.

mod arena;
pub mod learned;
mod skiplist;

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};

pub use arena::Arena;
pub use learned::{IndexStats, LearnedIndex, NodeStats, TreeShape, Upsert, ABSENT, MAX_SLOTS};
pub use skiplist::SkipListIndex;

use crate::config::MemtableIndexKind;
use crate::error::{Error, Result};
use crate::types::{InternalRecord, OpKind, RecordRef, UserKey};

pub enum MemIndex {
    Learned(LearnedIndex),
    SkipList(SkipListIndex),
}

impl MemIndex {
    fn upsert(&self, key: u64, seq: u64, handle: u64, seq_of: &dyn Fn(u64) -> u64) -> Upsert {
        match self {
            MemIndex::Learned(i) => i.upsert(key, seq, handle, seq_of),
            MemIndex::SkipList(i) => i.upsert(key, seq, handle, seq_of),
        }
    }

    fn get(&self, key: u64) -> Option<u64> {
        match self {
            MemIndex::Learned(i) => i.get(key),
            MemIndex::SkipList(i) => i.get(key),
        }
    }

    fn entries(&self) -> Vec<(u64, u64)> {
        match self {
            MemIndex::Learned(i) => i.entries(),
            MemIndex::SkipList(i) => i.entries(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemtableStats {
    /// Accepted insert calls.
    pub inserts: u64,
    pub lookups: u64,
    pub shifts: u64,
    pub resizes: u64,
    pub splits: u64,
    pub data_nodes: usize,
    pub model_nodes: usize,
}

pub struct Memtable {
    id: u64,
    arena: Arena,
    index: MemIndex,
    immutable: AtomicBool,
    inflight: AtomicUsize,
    inserts: AtomicU64,
    live_keys: AtomicUsize,
    from_skeleton: bool,
}

impl Memtable {
    pub fn new(id: u64, kind: MemtableIndexKind, budget: usize) -> Self {
        let index = match kind {
            MemtableIndexKind::Learned => MemIndex::Learned(LearnedIndex::new()),
            MemtableIndexKind::SkipListBaseline => MemIndex::SkipList(SkipListIndex::new()),
        };
        Self::with_index(id, index, budget, false)
    }

    /// A memtable over a prebuilt learned index (a skeleton instance).
    pub fn with_learned_index(id: u64, index: LearnedIndex, budget: usize) -> Self {
        Self::with_index(id, MemIndex::Learned(index), budget, true)
    }

    fn with_index(id: u64, index: MemIndex, budget: usize, from_skeleton: bool) -> Self {
        Memtable {
            id,
            arena: Arena::new(budget),
            index,
            immutable: AtomicBool::new(false),
            inflight: AtomicUsize::new(0),
            inserts: AtomicU64::new(0),
            live_keys: AtomicUsize::new(0),
            from_skeleton,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn from_skeleton(&self) -> bool {
        self.from_skeleton
    }

    pub fn index(&self) -> &MemIndex {
        &self.index
    }

    pub fn learned(&self) -> Option<&LearnedIndex> {
        match &self.index {
            MemIndex::Learned(i) => Some(i),
            MemIndex::SkipList(_) => None,
        }
    }

    /// Appends and indexes one record; returns bytes used afterwards.
    pub fn insert(&self, key: UserKey, seq: u64, kind: OpKind, value: &[u8]) -> Result<usize> {
        let handle = self.begin_insert(key, seq, kind, value)?;
        self.finish_insert(key, seq, handle);
        Ok(self.arena.bytes_used())
    }

    /// First half of an insert: stores the record in the arena. Every
    /// successful call must be followed by `finish_insert` with the returned
    /// handle; until then `freeze` waits.
    pub fn begin_insert(&self, key: UserKey, seq: u64, kind: OpKind, value: &[u8]) -> Result<u64> {
        self.inflight.fetch_add(1, Ordering::SeqCst);
        if self.immutable.load(Ordering::SeqCst) {
            self.inflight.fetch_sub(1, Ordering::SeqCst);
            return Err(Error::Immutable);
        }
        self.arena.append(key, seq, kind, value).inspect_err(|_| {
            self.inflight.fetch_sub(1, Ordering::SeqCst);
        })
    }

    /// Abandons an insert started with `begin_insert`; the record stays in
    /// the arena but is never indexed.
    pub fn abort_insert(&self) {
        self.inflight.fetch_sub(1, Ordering::SeqCst);
    }

    /// Second half of an insert: makes the record visible.
    pub fn finish_insert(&self, key: UserKey, seq: u64, handle: u64) {
        let arena = &self.arena;
        if self.index.upsert(key.0, seq, handle, &|h| arena.seq(h)) == Upsert::NewKey {
            self.live_keys.fetch_add(1, Ordering::Relaxed);
        }
        self.inserts.fetch_add(1, Ordering::Relaxed);
        self.inflight.fetch_sub(1, Ordering::SeqCst);
    }

    /// Newest record for `key`, tombstones included.
    pub fn get(&self, key: UserKey) -> Option<InternalRecord> {
        self.get_with(key, |r| r.to_owned())
    }

    pub fn get_with<R>(&self, key: UserKey, f: impl FnOnce(RecordRef<'_>) -> R) -> Option<R> {
        self.index.get(key.0).map(|h| f(self.arena.record(h)))
    }

    /// Records in strictly increasing key order, one per key.
    pub fn iter(&self) -> MemIter<'_> {
        MemIter {
            arena: &self.arena,
            entries: self.index.entries().into_iter(),
        }
    }

    /// Records with keys in `[lo, hi]`.
    pub fn range(&self, lo: UserKey, hi: UserKey) -> Vec<InternalRecord> {
        self.range_limit(lo, hi, usize::MAX)
    }

    /// The first `limit` records with keys in `[lo, hi]`.
    pub fn range_limit(&self, lo: UserKey, hi: UserKey, limit: usize) -> Vec<InternalRecord> {
        let entries = match &self.index {
            MemIndex::Learned(i) => i.range(lo.0, hi.0, limit),
            MemIndex::SkipList(i) => i.range(lo.0, hi.0, limit),
        };
        entries.into_iter().map(|(_, h)| self.arena.record(h).to_owned()).collect()
    }

    /// Keys currently holding a record, ascending.
    pub fn sorted_keys(&self) -> Vec<u64> {
        self.index.entries().into_iter().map(|e| e.0).collect()
    }

    /// `(key, arena handle)` pairs, ascending.
    pub(crate) fn key_entries(&self) -> Vec<(u64, u64)> {
        self.index.entries()
    }

    /// Rejects further inserts and waits for in-progress ones to land.
    pub fn freeze(&self) {
        self.immutable.store(true, Ordering::SeqCst);
        while self.inflight.load(Ordering::SeqCst) != 0 {
            std::thread::yield_now();
        }
    }

    pub fn is_immutable(&self) -> bool {
        self.immutable.load(Ordering::SeqCst)
    }

    pub fn bytes_used(&self) -> usize {
        self.arena.bytes_used()
    }

    pub fn budget(&self) -> usize {
        self.arena.budget()
    }

    /// Number of distinct keys.
    pub fn len(&self) -> usize {
        self.live_keys.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> MemtableStats {
        let inserts = self.inserts.load(Ordering::Relaxed);
        match &self.index {
            MemIndex::Learned(i) => {
                let s = i.stats();
                MemtableStats {
                    inserts,
                    lookups: s.lookups,
                    shifts: s.shifts,
                    resizes: s.resizes,
                    splits: s.splits,
                    data_nodes: s.data_nodes,
                    model_nodes: s.model_nodes,
                }
            }
            MemIndex::SkipList(i) => MemtableStats {
                inserts,
                lookups: i.lookups(),
                ..Default::default()
            },
        }
    }
}

pub struct MemIter<'a> {
    arena: &'a Arena,
    entries: std::vec::IntoIter<(u64, u64)>,
}

impl<'a> Iterator for MemIter<'a> {
    type Item = RecordRef<'a>;

    fn next(&mut self) -> Option<RecordRef<'a>> {
        self.entries.next().map(|(_, h)| self.arena.record(h))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.entries.size_hint()
    }
}

impl ExactSizeIterator for MemIter<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    const KINDS: [MemtableIndexKind; 2] = [MemtableIndexKind::Learned, MemtableIndexKind::SkipListBaseline];

    #[test]
    fn read_your_write_and_in_place_update() {
        for kind in KINDS {
            let m = Memtable::new(1, kind, 1 << 20);
            assert!(m.get(UserKey(7)).is_none());
            m.insert(UserKey(7), 1, OpKind::Put, b"a").unwrap();
            assert_eq!(m.get(UserKey(7)).unwrap().value, b"a");
            m.insert(UserKey(7), 2, OpKind::Put, b"b").unwrap();
            assert_eq!(m.get(UserKey(7)).unwrap().value, b"b");
            assert_eq!(m.len(), 1);
            assert_eq!(m.iter().count(), 1);
            m.insert(UserKey(7), 3, OpKind::Delete, b"").unwrap();
            assert!(m.get(UserKey(7)).unwrap().is_tombstone());
        }
    }

    #[test]
    fn iteration_is_sorted() {
        for kind in KINDS {
            let m = Memtable::new(1, kind, 1 << 20);
            assert_eq!(m.iter().count(), 0);
            for (s, k) in [3u64, 1, 2].into_iter().enumerate() {
                m.insert(UserKey(k), s as u64, OpKind::Put, b"v").unwrap();
            }
            let keys: Vec<u64> = m.iter().map(|r| r.key.0).collect();
            assert_eq!(keys, vec![1, 2, 3]);
        }
    }

    #[test]
    fn range_matches_oracle() {
        for kind in KINDS {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let m = Memtable::new(1, kind, 64 << 20);
            let mut oracle = BTreeMap::new();
            for seq in 0..120_000u64 {
                let k = rng.random_range(0..1u64 << 40);
                m.insert(UserKey(k), seq, OpKind::Put, b"r").unwrap();
                oracle.insert(k, seq);
            }
            for _ in 0..300 {
                let lo = rng.random_range(0..1u64 << 40);
                let hi = lo + rng.random_range(0..1u64 << 32);
                let got: Vec<(u64, u64)> = m.range(UserKey(lo), UserKey(hi)).iter().map(|r| (r.key.0, r.seq)).collect();
                let want: Vec<(u64, u64)> = oracle.range(lo..=hi).map(|(&k, &s)| (k, s)).collect();
                assert_eq!(got, want);
            }
            assert!(m.range(UserKey(5), UserKey(4)).is_empty());
            let first: Vec<u64> = m.range_limit(UserKey(1000), UserKey(u64::MAX), 7).iter().map(|r| r.key.0).collect();
            let want: Vec<u64> = oracle.range(1000..).take(7).map(|(&k, _)| k).collect();
            assert_eq!(first, want);
            assert_eq!(m.range(UserKey(0), UserKey(u64::MAX)).len(), oracle.len());
        }
    }

    #[test]
    fn mixed_ops_match_sorted_map_oracle() {
        for kind in KINDS {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let m = Memtable::new(1, kind, 256 << 20);
            let mut oracle: BTreeMap<u64, Option<Vec<u8>>> = BTreeMap::new();
            for seq in 0..100_000u64 {
                let k = rng.random_range(0..30_000u64);
                match rng.random_range(0..10) {
                    0..=5 => {
                        let v = seq.to_le_bytes().to_vec();
                        m.insert(UserKey(k), seq, OpKind::Put, &v).unwrap();
                        oracle.insert(k, Some(v));
                    }
                    6 => {
                        m.insert(UserKey(k), seq, OpKind::Delete, b"").unwrap();
                        oracle.insert(k, None);
                    }
                    _ => {
                        let got = m.get(UserKey(k)).map(|r| (!r.is_tombstone()).then_some(r.value));
                        assert_eq!(got, oracle.get(&k).cloned());
                    }
                }
            }
            let got: Vec<(u64, Option<Vec<u8>>)> = m
                .iter()
                .map(|r| (r.key.0, (r.kind == OpKind::Put).then(|| r.value.to_vec())))
                .collect();
            assert_eq!(got, oracle.into_iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn budget_and_immutability() {
        for kind in KINDS {
            let m = Memtable::new(1, kind, 1 << 20);
            let v = vec![0u8; 100];
            let mut accepted = 0u64;
            loop {
                match m.insert(UserKey(accepted), accepted, OpKind::Put, &v) {
                    Ok(used) => assert!(used <= m.budget()),
                    Err(Error::MemtableFull) => break,
                    Err(e) => panic!("{e}"),
                }
                accepted += 1;
            }
            assert_eq!(m.stats().inserts, accepted);
            m.freeze();
            assert!(matches!(m.insert(UserKey(0), 0, OpKind::Put, b""), Err(Error::Immutable)));
            assert_eq!(m.iter().count() as u64, accepted);
        }
    }

    #[test]
    fn concurrent_writers_and_readers() {
        for kind in KINDS {
            let m = Arc::new(Memtable::new(1, kind, 512 << 20));
            let seq = Arc::new(AtomicU64::new(1));
            let writers: Vec<_> = (0..16u64)
                .map(|t| {
                    let (m, seq) = (m.clone(), seq.clone());
                    std::thread::spawn(move || {
                        for i in 0..5000u64 {
                            let k = i * 16 + t;
                            let s = seq.fetch_add(1, Ordering::Relaxed);
                            m.insert(UserKey(k), s, OpKind::Put, &k.to_le_bytes()).unwrap();
                            let r = m.get(UserKey(k)).unwrap();
                            assert_eq!(r.value, k.to_le_bytes());
                        }
                    })
                })
                .collect();
            let readers: Vec<_> = (0..4u64)
                .map(|_| {
                    let m = m.clone();
                    std::thread::spawn(move || {
                        let mut rng = ChaCha8Rng::seed_from_u64(77);
                        for _ in 0..50_000 {
                            let k = rng.random_range(0..80_000u64);
                            if let Some(r) = m.get(UserKey(k)) {
                                assert_eq!(r.value, k.to_le_bytes());
                            }
                        }
                    })
                })
                .collect();
            for t in writers.into_iter().chain(readers) {
                t.join().unwrap();
            }
            assert_eq!(m.len(), 80_000);
            let keys: Vec<u64> = m.iter().map(|r| r.key.0).collect();
            assert_eq!(keys, (0..80_000).collect::<Vec<_>>());
            if let Some(l) = m.learned() {
                l.check_invariants().unwrap();
            }
        }
    }

    #[test]
    fn concurrent_updates_keep_newest_version() {
        for kind in KINDS {
            let m = Arc::new(Memtable::new(1, kind, 64 << 20));
            let seq = Arc::new(AtomicU64::new(1));
            let threads: Vec<_> = (0..8)
                .map(|_| {
                    let (m, seq) = (m.clone(), seq.clone());
                    std::thread::spawn(move || {
                        for i in 0..4000u64 {
                            let s = seq.fetch_add(1, Ordering::SeqCst);
                            m.insert(UserKey(i % 100), s, OpKind::Put, &s.to_le_bytes()).unwrap();
                        }
                    })
                })
                .collect();
            for t in threads {
                t.join().unwrap();
            }
            let max_seq = seq.load(Ordering::SeqCst) - 1;
            let newest = m.iter().map(|r| r.seq).max().unwrap();
            assert_eq!(newest, max_seq);
            for r in m.iter() {
                assert_eq!(r.value, r.seq.to_le_bytes());
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn prop_oracle_equivalence(ops in proptest::collection::vec((0u64..500, 0u8..4), 1..600)) {
            for kind in KINDS {
                let m = Memtable::new(1, kind, 16 << 20);
                let mut oracle = BTreeMap::new();
                for (seq, &(k, op)) in ops.iter().enumerate() {
                    let seq = seq as u64;
                    if op == 0 {
                        m.insert(UserKey(k), seq, OpKind::Delete, b"").unwrap();
                        oracle.insert(k, None);
                    } else {
                        m.insert(UserKey(k), seq, OpKind::Put, &[op; 3]).unwrap();
                        oracle.insert(k, Some(vec![op; 3]));
                    }
                }
                for (&k, v) in &oracle {
                    let r = m.get(UserKey(k)).unwrap();
                    proptest::prop_assert_eq!(r.kind == OpKind::Put, v.is_some());
                }
                proptest::prop_assert_eq!(m.iter().count(), oracle.len());
                proptest::prop_assert_eq!(m.stats().inserts, ops.len() as u64);
            }
        }
    }
}
