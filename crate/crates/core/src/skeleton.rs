//! Memtable skeletons: the node hierarchy of a bulk-loaded learned index with
//! payloads and statistics cleared, used to start new memtables warm.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::config::{MemtableIndexKind, SkeletonMode};
use crate::error::{Error, Result};
use crate::memtable::learned::Tree;
use crate::memtable::{LearnedIndex, Memtable, TreeShape};

pub struct Skeleton {
    tree: Tree,
    source_key_count: usize,
}

impl Skeleton {
    /// Extracts the keys of `memtable` (normally frozen) and bulk-loads a
    /// clean structure for them.
    pub fn create(memtable: &Memtable) -> Result<Skeleton> {
        let entries = memtable.key_entries();
        if entries.is_empty() {
            return Err(Error::EmptyMemtable);
        }
        let n = entries.len();
        Ok(Skeleton {
            tree: LearnedIndex::structural_tree(entries),
            source_key_count: n,
        })
    }

    pub fn from_keys(keys: &[u64]) -> Result<Skeleton> {
        if keys.is_empty() {
            return Err(Error::EmptyMemtable);
        }
        let built = LearnedIndex::bulk_load(keys)?;
        Ok(Skeleton {
            tree: built.skeleton_tree(),
            source_key_count: keys.len(),
        })
    }

    pub fn source_key_count(&self) -> usize {
        self.source_key_count
    }

    /// A learned index backed by a private deep copy of the skeleton.
    pub fn instantiate_index(&self) -> LearnedIndex {
        LearnedIndex::from_tree(self.tree.deep_clone())
    }

    pub fn instantiate(&self, id: u64, budget: usize) -> Memtable {
        Memtable::with_learned_index(id, self.instantiate_index(), budget)
    }

    pub fn shape(&self) -> TreeShape {
        self.tree.shape()
    }
}

/// Decides when skeletons are refreshed and hands them to new memtables.
pub struct SkeletonPolicy {
    phi: u64,
    mode: SkeletonMode,
    flushes: AtomicU64,
    scheduled: AtomicU64,
    installed: AtomicU64,
    current: RwLock<Option<Arc<Skeleton>>>,
    refreshing: AtomicBool,
    spare: Mutex<Option<LearnedIndex>>,
}

impl SkeletonPolicy {
    pub fn new(mode: SkeletonMode, phi: u32) -> Self {
        SkeletonPolicy {
            phi: u64::from(phi.max(1)),
            mode,
            flushes: AtomicU64::new(0),
            scheduled: AtomicU64::new(0),
            installed: AtomicU64::new(0),
            current: RwLock::new(None),
            refreshing: AtomicBool::new(false),
            spare: Mutex::new(None),
        }
    }

    pub fn mode(&self) -> SkeletonMode {
        self.mode
    }

    pub fn phi(&self) -> u64 {
        self.phi
    }

    /// Counts one rotation; true if a skeleton should be built from the
    /// memtable just frozen.
    pub fn on_flush(&self) -> bool {
        let c = self.flushes.fetch_add(1, Ordering::SeqCst) + 1;
        let due = match self.mode {
            SkeletonMode::Off => false,
            SkeletonMode::Single => c == 1,
            SkeletonMode::Periodic => c % self.phi == 0,
        };
        if due {
            self.scheduled.fetch_add(1, Ordering::SeqCst);
        }
        due
    }

    pub fn flushes(&self) -> u64 {
        self.flushes.load(Ordering::SeqCst)
    }

    pub fn scheduled(&self) -> u64 {
        self.scheduled.load(Ordering::SeqCst)
    }

    pub fn installed(&self) -> u64 {
        self.installed.load(Ordering::SeqCst)
    }

    pub fn current(&self) -> Option<Arc<Skeleton>> {
        self.current.read().clone()
    }

    /// Claims the right to run a refresh; false if one is already running.
    pub fn try_begin_refresh(&self) -> bool {
        !self.refreshing.swap(true, Ordering::SeqCst)
    }

    /// Publishes a new skeleton (if any) and releases the refresh claim.
    pub fn finish_refresh(&self, skeleton: Option<Skeleton>) {
        if let Some(s) = skeleton {
            *self.current.write() = Some(Arc::new(s));
            *self.spare.lock() = None;
            self.installed.fetch_add(1, Ordering::SeqCst);
        }
        self.refreshing.store(false, Ordering::SeqCst);
    }

    /// Builds a skeleton from `frozen` and installs it.
    pub fn refresh_from(&self, frozen: &Memtable) -> bool {
        if !self.try_begin_refresh() {
            return false;
        }
        let s = Skeleton::create(frozen).ok();
        let made = s.is_some();
        self.finish_refresh(s);
        made
    }

    /// Prepares a deep copy ahead of the next rotation so that taking it is
    /// cheap. No-op without a skeleton or if a copy is already waiting.
    pub fn prepare_spare(&self) {
        if self.spare.lock().is_some() {
            return;
        }
        if let Some(s) = self.current() {
            let idx = s.instantiate_index();
            let mut spare = self.spare.lock();
            let still_current = self.current().is_some_and(|c| Arc::ptr_eq(&c, &s));
            if spare.is_none() && still_current {
                *spare = Some(idx);
            }
        }
    }

    /// A new active memtable: warm from the current skeleton if one exists,
    /// otherwise empty.
    pub fn instantiate(&self, id: u64, kind: MemtableIndexKind, budget: usize) -> Memtable {
        if kind == MemtableIndexKind::SkipListBaseline || self.mode == SkeletonMode::Off {
            return Memtable::new(id, kind, budget);
        }
        if let Some(idx) = self.spare.lock().take() {
            return Memtable::with_learned_index(id, idx, budget);
        }
        match self.current() {
            Some(s) => s.instantiate(id, budget),
            None => Memtable::new(id, kind, budget),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{OpKind, UserKey};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled(keys: &[u64]) -> Memtable {
        let m = Memtable::new(0, MemtableIndexKind::Learned, 64 << 20);
        for (i, &k) in keys.iter().enumerate() {
            m.insert(UserKey(k), i as u64, OpKind::Put, b"value").unwrap();
        }
        m.freeze();
        m
    }

    #[test]
    fn skeleton_of_thousand_keys_is_clean() {
        let keys: Vec<u64> = (1..=1000).collect();
        let s = Skeleton::create(&filled(&keys)).unwrap();
        assert_eq!(s.source_key_count(), 1000);
        let shape = s.shape();
        assert_eq!(shape.structural_keys(), 1000);
        for d in &shape.data_nodes {
            assert_eq!(d.live_payloads, 0);
            assert_eq!(d.stats, Default::default());
            assert_eq!(d.lookups, 0);
        }
    }

    #[test]
    fn empty_memtable_gives_no_skeleton() {
        let m = Memtable::new(0, MemtableIndexKind::Learned, 1 << 20);
        m.freeze();
        assert!(matches!(Skeleton::create(&m), Err(Error::EmptyMemtable)));
    }

    #[test]
    fn structure_equals_direct_bulk_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let keys: Vec<u64> = (0..60_000).map(|_| rng.random::<u64>() >> 8).collect();
        let m = filled(&keys);
        let s = Skeleton::create(&m).unwrap();
        let direct = LearnedIndex::bulk_load(&m.sorted_keys()).unwrap();
        assert!(s.shape().same_structure(&direct.shape()));
    }

    #[test]
    fn reinserting_source_keys_needs_no_structural_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let keys: Vec<u64> = (0..100_000).map(|_| rng.random_range(0..1u64 << 48)).collect();
        let s = Skeleton::create(&filled(&keys)).unwrap();
        let m = s.instantiate(1, 64 << 20);
        for (i, &k) in keys.iter().enumerate() {
            m.insert(UserKey(k), i as u64, OpKind::Put, b"v").unwrap();
        }
        let st = m.stats();
        assert_eq!((st.shifts, st.resizes), (0, 0));
        assert_eq!(st.inserts, keys.len() as u64);
    }

    #[test]
    fn instances_share_no_state() {
        let keys: Vec<u64> = (0..5000).map(|i| i * 3).collect();
        let s = Skeleton::create(&filled(&keys)).unwrap();
        let a = s.instantiate(1, 1 << 20);
        let b = s.instantiate(2, 1 << 20);
        for i in 0..2000u64 {
            a.insert(UserKey(i * 3 + 1), i, OpKind::Put, b"x").unwrap();
        }
        let sb = b.learned().unwrap().shape();
        assert!(sb.same_structure(&s.shape()));
        assert!(sb.data_nodes.iter().all(|d| d.stats == Default::default()));
        assert_eq!(b.stats().inserts, 0);
        assert!(!a.learned().unwrap().shape().same_structure(&sb));
    }

    #[test]
    fn refresh_cadence() {
        let p = SkeletonPolicy::new(SkeletonMode::Periodic, 10);
        let due: Vec<bool> = (0..10).map(|_| p.on_flush()).collect();
        assert_eq!(due, [false, false, false, false, false, false, false, false, false, true]);
        for _ in 10..100 {
            p.on_flush();
        }
        assert_eq!(p.scheduled(), 10);

        let p = SkeletonPolicy::new(SkeletonMode::Periodic, 1);
        assert!((0..20).all(|_| p.on_flush()));

        let p = SkeletonPolicy::new(SkeletonMode::Single, 10);
        assert_eq!((0..50).filter(|_| p.on_flush()).count(), 1);

        let p = SkeletonPolicy::new(SkeletonMode::Off, 10);
        assert_eq!((0..50).filter(|_| p.on_flush()).count(), 0);
    }

    #[test]
    fn policy_instantiates_from_latest_skeleton() {
        let p = SkeletonPolicy::new(SkeletonMode::Periodic, 1);
        let m0 = p.instantiate(0, MemtableIndexKind::Learned, 1 << 20);
        assert!(!m0.from_skeleton());
        for k in 0..500 {
            m0.insert(UserKey(k), k, OpKind::Put, b"v").unwrap();
        }
        m0.freeze();
        assert!(p.on_flush());
        assert!(p.refresh_from(&m0));
        p.prepare_spare();
        let m1 = p.instantiate(1, MemtableIndexKind::Learned, 1 << 20);
        assert!(m1.from_skeleton());
        let m2 = p.instantiate(2, MemtableIndexKind::Learned, 1 << 20);
        assert!(m2.from_skeleton());
        assert!(m1.is_empty() && m2.is_empty());
        let sl = p.instantiate(3, MemtableIndexKind::SkipListBaseline, 1 << 20);
        assert!(sl.learned().is_none());
        assert!(p.try_begin_refresh());
        assert!(!p.refresh_from(&m0));
        p.finish_refresh(None);
        assert_eq!(p.installed(), 1);
    }
}
