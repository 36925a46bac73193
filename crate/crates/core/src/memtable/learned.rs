//! Updatable learned index over gapped arrays.
//!
//! Model nodes route a key to a child by a linear model; several adjacent
//! child slots may point at the same node. Data nodes keep a gapped key array
//! where every gap mirrors the key of the next occupied slot (trailing gaps
//! hold `u64::MAX`), so the raw key array is sorted and searchable without
//! consulting the bitmap. Payload slots hold arena handles or [`ABSENT`].
//!
//! An occupied slot whose payload is `ABSENT` is a structural key inherited
//! from a skeleton: lookups treat it as missing, and an insert landing next to
//! it may take the slot over without shifting anything.

use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::Result;
use crate::pla::{build_pla, check_sorted};

pub const ABSENT: u64 = u64::MAX;
pub const MAX_SLOTS: usize = 1 << 16;

const BULK_DENSITY: f64 = 0.7;
const D_LOW: f64 = 0.6;
const D_HIGH: f64 = 0.8;
const MIN_SLOTS: usize = 16;
const TARGET_LEAF: usize = 2048;
const MAX_BULK_LEAF: usize = 16384;
const MAX_FANOUT: usize = 4096;
const NONE: u32 = u32::MAX;
/// Inserts per shift-cost sample.
const COST_WINDOW: u32 = 256;
/// Mean shifts per insert above which a node is rebuilt.
const MAX_MEAN_SHIFTS: u64 = 32;
/// Degraded nodes with fewer live entries are retrained in place instead of split.
const MIN_SPLIT_LIVE: usize = 256;
/// Rank error of the piecewise fit that partitions a degraded node.
const SPLIT_EPSILON: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearModel {
    base: u64,
    slope: f64,
    intercept: f64,
}

impl LinearModel {
    fn flat(value: f64) -> Self {
        LinearModel {
            base: 0,
            slope: 0.0,
            intercept: value,
        }
    }

    #[inline]
    fn predict(&self, key: u64) -> f64 {
        let dx = if key >= self.base {
            (key - self.base) as f64
        } else {
            -((self.base - key) as f64)
        };
        self.slope * dx + self.intercept
    }

    /// Floored prediction clamped to `[0, n)`.
    #[inline]
    fn slot(&self, key: u64, n: usize) -> usize {
        let p = self.predict(key);
        if p <= 0.0 {
            0
        } else {
            (p as usize).min(n - 1)
        }
    }

    /// Least-squares fit of rank against the keys of sorted `entries`.
    fn fit(entries: &[(u64, u64)]) -> Self {
        let n = entries.len();
        if n < 2 {
            return LinearModel::flat(0.0);
        }
        let base = entries[0].0;
        let mean_x = entries.iter().map(|e| (e.0 - base) as f64).sum::<f64>() / n as f64;
        let mean_y = (n - 1) as f64 / 2.0;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, e) in entries.iter().enumerate() {
            let dx = (e.0 - base) as f64 - mean_x;
            sxy += dx * (i as f64 - mean_y);
            sxx += dx * dx;
        }
        let slope = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
        LinearModel {
            base,
            slope,
            intercept: mean_y - slope * mean_x,
        }
    }

    /// Maps `[min, max]` linearly onto `[0, n)`.
    fn spanning(min: u64, max: u64, n: usize) -> Self {
        LinearModel {
            base: min,
            slope: n as f64 / ((max - min) as f64 + 1.0),
            intercept: 0.0,
        }
    }

    fn scaled(self, factor: f64) -> Self {
        LinearModel {
            base: self.base,
            slope: self.slope * factor,
            intercept: self.intercept * factor,
        }
    }

    fn bits(&self) -> (u64, u64, u64) {
        (self.base, self.slope.to_bits(), self.intercept.to_bits())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub inserts: u64,
    pub shifts: u64,
    pub resizes: u64,
}

#[derive(Clone, Debug)]
pub(crate) struct DataNode {
    model: LinearModel,
    keys: Vec<u64>,
    payloads: Vec<u64>,
    bitmap: Vec<u64>,
    occupied: usize,
    live: usize,
    stats: NodeStats,
    window_inserts: u32,
    window_shifts: u64,
    degraded: bool,
}

#[derive(Debug, PartialEq, Eq)]
enum Outcome {
    /// New key placed, with the number of slots shifted.
    Inserted(u64),
    /// Key took over a structural slot.
    Reused,
    /// Existing key's payload replaced (or a structural slot filled).
    Updated,
    /// Existing payload is newer; nothing changed.
    Stale,
    /// Density limit reached, or inserts have become too costly; the node
    /// must be rebuilt first.
    Full,
}

fn capacity_for(n: usize, density: f64) -> usize {
    (((n as f64) / density).ceil() as usize).max(n + 1).max(MIN_SLOTS)
}

impl DataNode {
    fn empty() -> Self {
        Self::build(&[], MIN_SLOTS)
    }

    /// Model-based placement of sorted entries into `cap` slots.
    fn build(entries: &[(u64, u64)], cap: usize) -> Self {
        let n = entries.len();
        debug_assert!(cap > n);
        let model = if n == 0 {
            LinearModel::flat(0.0)
        } else {
            LinearModel::fit(entries).scaled(cap as f64 / n as f64)
        };
        let mut node = DataNode {
            model,
            keys: vec![u64::MAX; cap],
            payloads: vec![ABSENT; cap],
            bitmap: vec![0; cap.div_ceil(64)],
            occupied: n,
            live: entries.iter().filter(|e| e.1 != ABSENT).count(),
            stats: NodeStats::default(),
            window_inserts: 0,
            window_shifts: 0,
            degraded: false,
        };
        let mut next_free = 0usize;
        for (i, &(k, h)) in entries.iter().enumerate() {
            let p = model.slot(k, cap).max(next_free).min(cap - (n - i));
            node.keys[p] = k;
            node.payloads[p] = h;
            node.set(p);
            next_free = p + 1;
        }
        let mut mirror = u64::MAX;
        for i in (0..cap).rev() {
            if node.is_set(i) {
                mirror = node.keys[i];
            } else {
                node.keys[i] = mirror;
            }
        }
        node
    }

    #[inline]
    fn cap(&self) -> usize {
        self.keys.len()
    }

    #[inline]
    fn is_set(&self, i: usize) -> bool {
        self.bitmap[i >> 6] & (1 << (i & 63)) != 0
    }

    #[inline]
    fn set(&mut self, i: usize) {
        self.bitmap[i >> 6] |= 1 << (i & 63);
    }

    /// First index `>= i` whose bit equals `want`, or `cap`.
    fn next_with(&self, i: usize, want: bool) -> usize {
        let cap = self.cap();
        if i >= cap {
            return cap;
        }
        let mut w = i >> 6;
        let mut word = if want { self.bitmap[w] } else { !self.bitmap[w] } & (!0u64 << (i & 63));
        loop {
            if word != 0 {
                return (w * 64 + word.trailing_zeros() as usize).min(cap);
            }
            w += 1;
            if w == self.bitmap.len() {
                return cap;
            }
            word = if want { self.bitmap[w] } else { !self.bitmap[w] };
        }
    }

    /// Last index `<= i` whose bit equals `want`.
    fn prev_with(&self, i: usize, want: bool) -> Option<usize> {
        let mut w = i >> 6;
        let mut word = if want { self.bitmap[w] } else { !self.bitmap[w] }
            & (!0u64 >> (63 - (i & 63)));
        loop {
            if word != 0 {
                return Some(w * 64 + 63 - word.leading_zeros() as usize);
            }
            if w == 0 {
                return None;
            }
            w -= 1;
            word = if want { self.bitmap[w] } else { !self.bitmap[w] };
        }
    }

    #[inline]
    fn predict(&self, key: u64) -> usize {
        self.model.slot(key, self.cap())
    }

    /// First slot whose key exceeds `key`, by exponential search from the
    /// model's prediction.
    fn upper_bound(&self, key: u64) -> usize {
        let keys = &self.keys;
        let c = keys.len();
        let m = self.predict(key);
        if keys[m] > key {
            let mut bound = 1;
            while bound <= m && keys[m - bound] > key {
                bound *= 2;
            }
            let lo = if bound > m { 0 } else { m - bound + 1 };
            let hi = m - bound / 2;
            lo + keys[lo..hi].partition_point(|&x| x <= key)
        } else {
            let mut bound = 1;
            while m + bound < c && keys[m + bound] <= key {
                bound *= 2;
            }
            let lo = m + bound / 2 + 1;
            let hi = (m + bound).min(c);
            lo + keys[lo..hi].partition_point(|&x| x <= key)
        }
    }

    /// Occupied slot holding `key`, given its upper bound `u`.
    fn exact_at(&self, u: usize, key: u64) -> Option<usize> {
        if u == 0 || self.keys[u - 1] != key {
            return None;
        }
        if self.is_set(u - 1) {
            return Some(u - 1);
        }
        // Only trailing gaps (holding u64::MAX) reach here.
        self.prev_with(u - 1, true).filter(|&p| self.keys[p] == key)
    }

    fn find(&self, key: u64) -> Option<usize> {
        self.exact_at(self.upper_bound(key), key)
    }

    fn get(&self, key: u64) -> Option<u64> {
        self.find(key)
            .map(|i| self.payloads[i])
            .filter(|&h| h != ABSENT)
    }

    /// Gaps left of `i` mirror the key now stored at `i`.
    fn mirror_left(&mut self, i: usize) {
        let k = self.keys[i];
        let mut j = i;
        while j > 0 && !self.is_set(j - 1) {
            j -= 1;
            self.keys[j] = k;
        }
    }

    fn upsert(&mut self, key: u64, handle: u64, seq: u64, seq_of: &dyn Fn(u64) -> u64) -> Outcome {
        let u = self.upper_bound(key);
        if let Some(i) = self.exact_at(u, key) {
            let cur = self.payloads[i];
            if cur == ABSENT {
                self.payloads[i] = handle;
                self.live += 1;
            } else if seq_of(cur) < seq {
                self.payloads[i] = handle;
            } else {
                return Outcome::Stale;
            }
            return Outcome::Updated;
        }

        if self.degraded || (self.live + 1) as f64 > D_HIGH * self.cap() as f64 {
            return Outcome::Full;
        }
        let m = self.predict(key);
        let pos = if u < self.cap() && !self.is_set(u) && m > u {
            m.min(self.next_with(u, true) - 1)
        } else {
            u
        };
        if pos < self.cap() && !self.is_set(pos) {
            self.write(pos, key, handle);
            self.occupied += 1;
            self.live += 1;
            return Outcome::Inserted(0);
        }

        let left = if u == 0 { None } else { self.prev_with(u - 1, true) }
            .filter(|&i| self.payloads[i] == ABSENT);
        let right = Some(u).filter(|&i| i < self.cap() && self.is_set(i) && self.payloads[i] == ABSENT);
        let reuse = match (left, right) {
            (Some(l), Some(r)) => Some(if m.abs_diff(l) <= m.abs_diff(r) { l } else { r }),
            (l, r) => l.or(r),
        };
        if let Some(i) = reuse {
            self.keys[i] = key;
            self.payloads[i] = handle;
            self.live += 1;
            self.mirror_left(i);
            return Outcome::Reused;
        }

        let shifts = self.shift_in(pos, key, handle);
        self.live += 1;
        self.window_shifts += shifts;
        Outcome::Inserted(shifts)
    }

    /// Counts one new key and flags the node once the inserts of a window
    /// shift more than [`MAX_MEAN_SHIFTS`] slots each on average.
    fn note_insert(&mut self) {
        self.window_inserts += 1;
        let over = self.window_shifts > MAX_MEAN_SHIFTS * u64::from(COST_WINDOW);
        if over || self.window_inserts == COST_WINDOW {
            self.degraded = over;
            self.window_inserts = 0;
            self.window_shifts = 0;
        }
    }

    /// Inserts at the occupied upper-bound position `pos` by shifting the run
    /// of live slots toward the closest slot without a payload: a gap, or a
    /// structural key which is dropped. Returns the shift count.
    fn shift_in(&mut self, pos: usize, key: u64, handle: u64) -> u64 {
        let cap = self.cap();
        let mut d = 0;
        let (g, right) = loop {
            if pos + d < cap && self.payloads[pos + d] == ABSENT {
                break (pos + d, true);
            }
            if pos > d && self.payloads[pos - 1 - d] == ABSENT {
                break (pos - 1 - d, false);
            }
            d += 1;
            debug_assert!(pos + d < cap || pos > d, "data node without free slots");
        };
        if !self.is_set(g) {
            self.set(g);
            self.occupied += 1;
        }
        if right {
            self.keys.copy_within(pos..g, pos + 1);
            self.payloads.copy_within(pos..g, pos + 1);
            self.write(pos, key, handle);
            (g - pos) as u64
        } else {
            self.keys.copy_within(g + 1..pos, g);
            self.payloads.copy_within(g + 1..pos, g);
            self.mirror_left(g);
            self.write(pos - 1, key, handle);
            (pos - 1 - g) as u64
        }
    }

    fn write(&mut self, i: usize, key: u64, handle: u64) {
        self.keys[i] = key;
        self.payloads[i] = handle;
        self.set(i);
        self.mirror_left(i);
    }

    fn entries(&self, with_absent: bool) -> Vec<(u64, u64)> {
        let mut out = Vec::with_capacity(if with_absent { self.occupied } else { self.live });
        let mut i = self.next_with(0, true);
        while i < self.cap() {
            if with_absent || self.payloads[i] != ABSENT {
                out.push((self.keys[i], self.payloads[i]));
            }
            i = self.next_with(i + 1, true);
        }
        out
    }

    /// Appends live entries with keys in `[lo, hi]` until `out` holds
    /// `limit`; false once no more entries can follow.
    fn range_into(&self, lo: u64, hi: u64, limit: usize, out: &mut Vec<(u64, u64)>) -> bool {
        let start = if lo == 0 { 0 } else { self.upper_bound(lo - 1) };
        let mut i = self.next_with(start, true);
        while i < self.cap() {
            let k = self.keys[i];
            if k > hi || out.len() >= limit {
                return false;
            }
            if k >= lo && self.payloads[i] != ABSENT {
                out.push((k, self.payloads[i]));
            }
            i = self.next_with(i + 1, true);
        }
        true
    }

    /// Rebuilds the node around its live entries plus `(key, handle)`.
    /// Returns false if the result would exceed [`MAX_SLOTS`].
    fn expand_with(&mut self, key: u64, handle: u64) -> bool {
        let mut entries = self.entries(false);
        let at = entries.partition_point(|e| e.0 < key);
        entries.insert(at, (key, handle));
        let cap = capacity_for(entries.len(), D_LOW);
        if cap > MAX_SLOTS {
            return false;
        }
        let stats = self.stats;
        *self = DataNode::build(&entries, cap);
        self.stats = NodeStats {
            resizes: stats.resizes + 1,
            ..stats
        };
        true
    }

    fn needs_split(&self) -> bool {
        (self.degraded && self.live >= MIN_SPLIT_LIVE)
            || ((self.live + 1) as f64 > D_HIGH * self.cap() as f64 && capacity_for(self.live + 1, D_LOW) > MAX_SLOTS)
    }
}

pub(crate) struct DataCell {
    node: RwLock<DataNode>,
    lookups: AtomicU64,
}

impl DataCell {
    fn new(node: DataNode) -> Arc<Self> {
        Arc::new(DataCell {
            node: RwLock::new(node),
            lookups: AtomicU64::new(0),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRef {
    Model(u32),
    Data(u32),
}

#[derive(Clone, Debug)]
struct ModelNode {
    model: LinearModel,
    children: Vec<NodeRef>,
}

#[derive(Clone, Copy, Debug)]
struct DataMeta {
    parent: u32,
    start: u32,
    end: u32,
    prev: u32,
    next: u32,
    dead: bool,
}

/// Node hierarchy plus the leaf chain.
pub struct Tree {
    root: NodeRef,
    models: Vec<ModelNode>,
    data: Vec<Arc<DataCell>>,
    meta: Vec<DataMeta>,
    head: u32,
    /// Stats of nodes replaced by splits.
    retired: NodeStats,
    retired_lookups: u64,
    splits: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataShape {
    pub model: (u64, u64, u64),
    pub capacity: usize,
    pub bitmap: Vec<u64>,
    pub keys: Vec<u64>,
    pub live_payloads: usize,
    pub stats: NodeStats,
    pub lookups: u64,
}

/// Structural description of a tree, in leaf-chain order.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeShape {
    pub root: NodeRef,
    pub model_nodes: Vec<((u64, u64, u64), Vec<NodeRef>)>,
    pub data_nodes: Vec<DataShape>,
}

impl TreeShape {
    pub fn structural_keys(&self) -> usize {
        self.data_nodes.iter().map(|d| d.bitmap.iter().map(|w| w.count_ones() as usize).sum::<usize>()).sum()
    }

    /// Structure only: models, capacities, bitmaps and keys.
    pub fn same_structure(&self, other: &TreeShape) -> bool {
        self.root == other.root
            && self.model_nodes == other.model_nodes
            && self.data_nodes.len() == other.data_nodes.len()
            && self.data_nodes.iter().zip(&other.data_nodes).all(|(a, b)| {
                a.model == b.model && a.capacity == b.capacity && a.bitmap == b.bitmap && a.keys == b.keys
            })
    }
}

impl Tree {
    fn empty() -> Self {
        let mut t = Tree {
            root: NodeRef::Data(0),
            models: Vec::new(),
            data: Vec::new(),
            meta: Vec::new(),
            head: 0,
            retired: NodeStats::default(),
            retired_lookups: 0,
            splits: 0,
        };
        t.push_data(DataNode::empty(), NONE, 0, 0);
        t
    }

    /// Builds the hierarchy for sorted entries; payloads are kept as given.
    fn bulk(entries: &[(u64, u64)]) -> Self {
        if entries.len() <= MAX_BULK_LEAF {
            let mut t = Tree::empty();
            t.data[0] = DataCell::new(DataNode::build(entries, capacity_for(entries.len(), BULK_DENSITY)));
            return t;
        }
        let mut t = Tree {
            root: NodeRef::Model(0),
            models: Vec::new(),
            data: Vec::new(),
            meta: Vec::new(),
            head: 0,
            retired: NodeStats::default(),
            retired_lookups: 0,
            splits: 0,
        };
        let mut created = Vec::new();
        let root = t.build_model(entries, BULK_DENSITY, MAX_BULK_LEAF, &mut created);
        t.root = NodeRef::Model(root);
        t.link(&created, NONE, NONE);
        t.head = created[0];
        t
    }

    fn push_data(&mut self, node: DataNode, parent: u32, start: u32, end: u32) -> u32 {
        let id = self.data.len() as u32;
        self.data.push(DataCell::new(node));
        self.meta.push(DataMeta {
            parent,
            start,
            end,
            prev: NONE,
            next: NONE,
            dead: false,
        });
        id
    }

    /// Chains `ids` in order between `prev` and `next`.
    fn link(&mut self, ids: &[u32], prev: u32, next: u32) {
        let mut p = prev;
        for &id in ids {
            self.meta[id as usize].prev = p;
            if p != NONE {
                self.meta[p as usize].next = id;
            }
            p = id;
        }
        self.meta[p as usize].next = next;
        if next != NONE {
            self.meta[next as usize].prev = p;
        }
    }

    /// Creates a model node over `entries` whose children are data nodes
    /// grouped to about `TARGET_LEAF` keys; slots holding more than
    /// `max_leaf` keys recurse. New data ids are appended to `created` in key
    /// order.
    fn build_model(
        &mut self,
        entries: &[(u64, u64)],
        density: f64,
        max_leaf: usize,
        created: &mut Vec<u32>,
    ) -> u32 {
        let n = entries.len();
        let fanout = n.div_ceil(TARGET_LEAF).next_power_of_two().clamp(2, MAX_FANOUT);
        let slot_bounds = |model: &LinearModel| {
            let mut bounds = vec![0usize; fanout + 1];
            let mut s = 0;
            for (i, &(k, _)) in entries.iter().enumerate() {
                let ks = model.slot(k, fanout);
                while s < ks {
                    s += 1;
                    bounds[s] = i;
                }
            }
            while s < fanout {
                s += 1;
                bounds[s] = n;
            }
            bounds
        };
        let mut model = LinearModel::fit(entries).scaled(fanout as f64 / n as f64);
        let mut bounds = slot_bounds(&model);
        let largest = bounds.windows(2).map(|w| w[1] - w[0]).max().unwrap();
        if largest > n / 2 {
            model = LinearModel::spanning(entries[0].0, entries[n - 1].0, fanout);
            bounds = slot_bounds(&model);
        }

        let id = self.models.len() as u32;
        self.models.push(ModelNode {
            model,
            children: vec![NodeRef::Data(NONE); fanout],
        });

        let mut group_start = 0;
        let mut s = 0;
        while s < fanout {
            let count = bounds[s + 1] - bounds[s];
            if count > max_leaf {
                if group_start < s {
                    self.emit_group(id, group_start, s, &entries[bounds[group_start]..bounds[s]], density, created);
                }
                let child = self.build_model(&entries[bounds[s]..bounds[s + 1]], density, max_leaf, created);
                self.models[id as usize].children[s] = NodeRef::Model(child);
                group_start = s + 1;
            } else if bounds[s + 1] - bounds[group_start] > TARGET_LEAF && group_start < s {
                self.emit_group(id, group_start, s, &entries[bounds[group_start]..bounds[s]], density, created);
                group_start = s;
                continue;
            }
            s += 1;
        }
        if group_start < fanout {
            self.emit_group(id, group_start, fanout, &entries[bounds[group_start]..n], density, created);
        }
        id
    }

    /// Model node over `entries` with one data node per piece of a piecewise
    /// linear fit, routed by key range. Pieces too narrow to get a slot of
    /// their own are partitioned again one level down. None if the fit has a
    /// single piece.
    fn build_segmented(&mut self, entries: &[(u64, u64)], created: &mut Vec<u32>) -> Option<u32> {
        let keys: Vec<u64> = entries.iter().map(|e| e.0).collect();
        let segs = build_pla(&keys, SPLIT_EPSILON).ok()?;
        if segs.len() < 2 {
            return None;
        }
        // The last piece starts at the last slot and absorbs every larger key.
        let (lo, hi) = (keys[0], segs[segs.len() - 1].first_key);
        let narrowest = segs
            .windows(2)
            .map(|w| w[1].first_key - w[0].first_key)
            .min()
            .unwrap_or(1)
            .max(1);
        let want = ((hi - lo) as f64 / narrowest as f64).ceil() as usize;
        let fanout = want.next_power_of_two().clamp(2, MAX_FANOUT);
        let model = LinearModel::spanning(lo, hi, fanout);
        let id = self.models.len() as u32;
        self.models.push(ModelNode {
            model,
            children: vec![NodeRef::Data(NONE); fanout],
        });
        let mut cuts: Vec<(usize, usize)> = vec![(0, 0)];
        for seg in &segs[1..] {
            let slot = model.slot(seg.first_key, fanout);
            if slot > cuts[cuts.len() - 1].0 {
                let at = keys.partition_point(|&k| model.slot(k, fanout) < slot);
                if at > cuts[cuts.len() - 1].1 && at < keys.len() {
                    cuts.push((slot, at));
                }
            }
        }
        cuts.push((fanout, keys.len()));
        let starts: Vec<usize> = segs.iter().map(|g| keys.partition_point(|&k| k < g.first_key)).collect();
        for w in cuts.windows(2) {
            let ((s0, e0), (s1, e1)) = (w[0], w[1]);
            let merged = starts.iter().any(|&i| i > e0 && i < e1);
            let nested = if merged && e1 - e0 < keys.len() {
                self.build_segmented(&entries[e0..e1], created)
            } else {
                None
            };
            match nested {
                Some(m) => self.models[id as usize].children[s0..s1].fill(NodeRef::Model(m)),
                None => self.emit_group(id, s0, s1, &entries[e0..e1], D_LOW, created),
            }
        }
        Some(id)
    }

    fn emit_group(
        &mut self,
        model: u32,
        start: usize,
        end: usize,
        entries: &[(u64, u64)],
        density: f64,
        created: &mut Vec<u32>,
    ) {
        let cap = capacity_for(entries.len(), density).min(MAX_SLOTS);
        let d = self.push_data(DataNode::build(entries, cap), model, start as u32, end as u32);
        self.models[model as usize].children[start..end].fill(NodeRef::Data(d));
        created.push(d);
    }

    #[inline]
    fn route(&self, key: u64) -> u32 {
        let mut r = self.root;
        loop {
            match r {
                NodeRef::Data(d) => return d,
                NodeRef::Model(m) => {
                    let node = &self.models[m as usize];
                    r = node.children[node.model.slot(key, node.children.len())];
                }
            }
        }
    }

    /// Replaces data node `d` by two siblings or by a new model node.
    fn split(&mut self, d: u32) {
        let meta = self.meta[d as usize];
        let (entries, stats, lookups, degraded) = {
            let cell = &self.data[d as usize];
            let node = cell.node.read();
            (node.entries(false), node.stats, cell.lookups.load(Relaxed), node.degraded)
        };
        let mut created = Vec::new();
        let segmented = if degraded { self.build_segmented(&entries, &mut created) } else { None };
        if let Some(m) = segmented {
            if meta.parent == NONE {
                self.root = NodeRef::Model(m);
            } else {
                self.models[meta.parent as usize].children[meta.start as usize..meta.end as usize]
                    .fill(NodeRef::Model(m));
            }
        } else if meta.parent != NONE && meta.end - meta.start >= 2 {
            let parent = &self.models[meta.parent as usize];
            let mid = meta.start + (meta.end - meta.start) / 2;
            let fanout = parent.children.len();
            let cut = entries.partition_point(|e| parent.model.slot(e.0, fanout) < mid as usize);
            for (lo, hi, part) in [(meta.start, mid, &entries[..cut]), (mid, meta.end, &entries[cut..])] {
                let cap = capacity_for(part.len(), D_LOW).min(MAX_SLOTS);
                let id = self.push_data(DataNode::build(part, cap), meta.parent, lo, hi);
                self.models[meta.parent as usize].children[lo as usize..hi as usize].fill(NodeRef::Data(id));
                created.push(id);
            }
        } else {
            let m = self.build_model(&entries, D_LOW, MAX_BULK_LEAF, &mut created);
            if meta.parent == NONE {
                self.root = NodeRef::Model(m);
            } else {
                self.models[meta.parent as usize].children[meta.start as usize..meta.end as usize]
                    .fill(NodeRef::Model(m));
            }
        }
        self.link(&created, meta.prev, meta.next);
        if self.head == d {
            self.head = created[0];
        }
        self.meta[d as usize].dead = true;
        self.data[d as usize] = DataCell::new(DataNode::build(&[], 1));
        self.retired.inserts += stats.inserts;
        self.retired.shifts += stats.shifts;
        self.retired.resizes += stats.resizes;
        self.retired_lookups += lookups;
        self.splits += 1;
    }

    fn leaves(&self) -> impl Iterator<Item = &Arc<DataCell>> + '_ {
        let mut cur = self.head;
        std::iter::from_fn(move || {
            if cur == NONE {
                return None;
            }
            let cell = &self.data[cur as usize];
            cur = self.meta[cur as usize].next;
            Some(cell)
        })
    }

    /// Deep copy with fresh locks and lookup counters.
    pub(crate) fn deep_clone(&self) -> Tree {
        Tree {
            root: self.root,
            models: self.models.clone(),
            data: self
                .data
                .iter()
                .map(|c| DataCell::new(c.node.read().clone()))
                .collect(),
            meta: self.meta.clone(),
            head: self.head,
            retired: NodeStats::default(),
            retired_lookups: 0,
            splits: 0,
        }
    }

    /// Clears payloads and statistics, keeping every structural key.
    fn clear_payloads_and_stats(&mut self) {
        for cell in &self.data {
            let mut n = cell.node.write();
            n.payloads.fill(ABSENT);
            n.live = 0;
            n.stats = NodeStats::default();
            n.window_inserts = 0;
            n.window_shifts = 0;
            n.degraded = false;
            cell.lookups.store(0, Relaxed);
        }
        self.retired = NodeStats::default();
        self.retired_lookups = 0;
        self.splits = 0;
    }

    pub(crate) fn shape(&self) -> TreeShape {
        TreeShape {
            root: self.root,
            model_nodes: self
                .models
                .iter()
                .map(|m| (m.model.bits(), m.children.clone()))
                .collect(),
            data_nodes: self
                .leaves()
                .map(|c| {
                    let n = c.node.read();
                    DataShape {
                        model: n.model.bits(),
                        capacity: n.cap(),
                        bitmap: n.bitmap.clone(),
                        keys: n.keys.clone(),
                        live_payloads: n.live,
                        stats: n.stats,
                        lookups: c.lookups.load(Relaxed),
                    }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IndexStats {
    pub inserts: u64,
    pub lookups: u64,
    pub shifts: u64,
    pub resizes: u64,
    pub splits: u64,
    pub data_nodes: usize,
    pub model_nodes: usize,
}

/// What an upsert did, for memtable accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsert {
    NewKey,
    Replaced,
    Stale,
}

pub struct LearnedIndex {
    tree: RwLock<Tree>,
}

impl Default for LearnedIndex {
    fn default() -> Self {
        Self::new()
    }
}

impl LearnedIndex {
    /// An index with a single empty data node.
    pub fn new() -> Self {
        LearnedIndex {
            tree: RwLock::new(Tree::empty()),
        }
    }

    /// Builds the structure for `keys` with every payload absent.
    pub fn bulk_load(keys: &[u64]) -> Result<Self> {
        check_sorted(keys)?;
        let entries: Vec<(u64, u64)> = keys.iter().map(|&k| (k, ABSENT)).collect();
        Ok(LearnedIndex {
            tree: RwLock::new(Tree::bulk(&entries)),
        })
    }

    /// The bare structure for sorted `entries`, every payload cleared.
    pub(crate) fn structural_tree(mut entries: Vec<(u64, u64)>) -> Tree {
        for e in &mut entries {
            e.1 = ABSENT;
        }
        Tree::bulk(&entries)
    }

    pub(crate) fn from_tree(tree: Tree) -> Self {
        LearnedIndex {
            tree: RwLock::new(tree),
        }
    }

    /// Maps `key` to `handle` unless the key already holds a record with a
    /// higher sequence number.
    pub fn upsert(&self, key: u64, seq: u64, handle: u64, seq_of: &dyn Fn(u64) -> u64) -> Upsert {
        loop {
            {
                let tree = self.tree.read();
                let mut node = tree.data[tree.route(key) as usize].node.write();
                let before_live = node.live;
                let outcome = match node.upsert(key, handle, seq, seq_of) {
                    Outcome::Full if !node.needs_split() && node.expand_with(key, handle) => Outcome::Inserted(0),
                    Outcome::Full => Outcome::Full,
                    o => o,
                };
                match outcome {
                    Outcome::Full => {}
                    Outcome::Stale => {
                        node.stats.inserts += 1;
                        return Upsert::Stale;
                    }
                    o => {
                        node.stats.inserts += 1;
                        if let Outcome::Inserted(s) = o {
                            node.stats.shifts += s;
                        }
                        if node.live > before_live {
                            node.note_insert();
                        }
                        return if node.live > before_live {
                            Upsert::NewKey
                        } else {
                            Upsert::Replaced
                        };
                    }
                }
            }
            let mut tree = self.tree.write();
            let d = tree.route(key);
            if tree.data[d as usize].node.read().needs_split() {
                tree.split(d);
            }
        }
    }

    /// Live payload for `key`.
    pub fn get(&self, key: u64) -> Option<u64> {
        let tree = self.tree.read();
        let cell = &tree.data[tree.route(key) as usize];
        cell.lookups.fetch_add(1, Relaxed);
        let node = cell.node.read();
        node.get(key)
    }

    /// Whether `key` occupies a slot, and whether that slot has a payload.
    pub fn probe_slot(&self, key: u64) -> Option<bool> {
        let tree = self.tree.read();
        let node = tree.data[tree.route(key) as usize].node.read();
        node.find(key).map(|i| node.payloads[i] != ABSENT)
    }

    /// Live (key, handle) pairs in key order.
    /// Up to `limit` live `(key, handle)` pairs with keys in `[lo, hi]`,
    /// ascending.
    pub fn range(&self, lo: u64, hi: u64, limit: usize) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        if lo > hi {
            return out;
        }
        let tree = self.tree.read();
        let mut cur = tree.route(lo);
        while cur != NONE {
            let more = tree.data[cur as usize].node.read().range_into(lo, hi, limit, &mut out);
            if !more {
                break;
            }
            cur = tree.meta[cur as usize].next;
        }
        out
    }

    pub fn entries(&self) -> Vec<(u64, u64)> {
        let tree = self.tree.read();
        let mut out = Vec::new();
        for cell in tree.leaves() {
            out.extend(cell.node.read().entries(false));
        }
        out
    }

    pub fn stats(&self) -> IndexStats {
        let tree = self.tree.read();
        let mut s = IndexStats {
            inserts: tree.retired.inserts,
            lookups: tree.retired_lookups,
            shifts: tree.retired.shifts,
            resizes: tree.retired.resizes + tree.splits,
            splits: tree.splits,
            data_nodes: 0,
            model_nodes: tree.models.len(),
        };
        for cell in tree.leaves() {
            let n = cell.node.read();
            s.inserts += n.stats.inserts;
            s.shifts += n.stats.shifts;
            s.resizes += n.stats.resizes;
            s.lookups += cell.lookups.load(Relaxed);
            s.data_nodes += 1;
        }
        s
    }

    pub fn shape(&self) -> TreeShape {
        self.tree.read().shape()
    }

    /// A self-contained copy of the structure with payloads and statistics
    /// cleared.
    pub(crate) fn skeleton_tree(&self) -> Tree {
        let mut t = self.tree.read().deep_clone();
        t.clear_payloads_and_stats();
        t
    }

    /// Checks ordering, mirroring and counters in every data node.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let tree = self.tree.read();
        let mut prev_max: Option<u64> = None;
        for (idx, cell) in tree.leaves().enumerate() {
            let n = cell.node.read();
            let occ: Vec<usize> = (0..n.cap()).filter(|&i| n.is_set(i)).collect();
            if occ.len() != n.occupied {
                return Err(format!("node {idx}: occupied count {} != {}", n.occupied, occ.len()));
            }
            let live = occ.iter().filter(|&&i| n.payloads[i] != ABSENT).count();
            if live != n.live {
                return Err(format!("node {idx}: live count {} != {live}", n.live));
            }
            if n.keys.windows(2).any(|w| w[0] > w[1]) {
                return Err(format!("node {idx}: key array not sorted"));
            }
            if occ.windows(2).any(|w| n.keys[w[0]] >= n.keys[w[1]]) {
                return Err(format!("node {idx}: duplicate occupied keys"));
            }
            if let (Some(p), Some(&f)) = (prev_max, occ.first()) {
                if n.keys[f] <= p {
                    return Err(format!("node {idx}: overlaps previous node"));
                }
            }
            if let Some(&l) = occ.last() {
                prev_max = Some(n.keys[l]);
            }
            for &i in &occ {
                if tree.data[tree.route(n.keys[i]) as usize].node.data_ptr() != cell.node.data_ptr() {
                    return Err(format!("node {idx}: key {} routes elsewhere", n.keys[i]));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    /// Handles double as sequence numbers in these tests.
    fn seq_id(h: u64) -> u64 {
        h
    }

    #[test]
    fn upper_bound_matches_binary_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(0..500);
            let mut keys: Vec<u64> = (0..n).map(|_| rng.random_range(0..10_000)).collect();
            keys.sort_unstable();
            keys.dedup();
            let entries: Vec<_> = keys.iter().map(|&k| (k, k)).collect();
            let node = DataNode::build(&entries, capacity_for(keys.len(), 0.7));
            for q in 0..10_050u64 {
                let u = node.upper_bound(q);
                assert_eq!(u, node.keys.partition_point(|&x| x <= q));
                assert_eq!(node.get(q).is_some(), keys.binary_search(&q).is_ok());
            }
        }
    }

    #[test]
    fn bitmap_scans() {
        let entries: Vec<_> = (0..40u64).map(|k| (k * 3, k)).collect();
        let node = DataNode::build(&entries, 130);
        for i in 0..130 {
            let nx = (i..130).find(|&j| node.is_set(j)).unwrap_or(130);
            assert_eq!(node.next_with(i, true), nx);
            let ng = (i..130).find(|&j| !node.is_set(j)).unwrap_or(130);
            assert_eq!(node.next_with(i, false), ng);
            assert_eq!(node.prev_with(i, true), (0..=i).rev().find(|&j| node.is_set(j)));
            assert_eq!(node.prev_with(i, false), (0..=i).rev().find(|&j| !node.is_set(j)));
        }
    }

    #[test]
    fn random_inserts_match_oracle_and_keep_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx = LearnedIndex::new();
        let mut oracle = BTreeMap::new();
        for seq in 1..=100_000u64 {
            let k = rng.random_range(0..200_000u64) * 1_000_003;
            idx.upsert(k, seq, seq, &seq_id);
            oracle.insert(k, seq);
        }
        idx.check_invariants().unwrap();
        let got = idx.entries();
        assert_eq!(got, oracle.iter().map(|(&k, &v)| (k, v)).collect::<Vec<_>>());
        for (&k, &v) in oracle.iter().step_by(7) {
            assert_eq!(idx.get(k), Some(v));
            assert_eq!(idx.get(k + 1), None);
        }
        let st = idx.stats();
        assert_eq!(st.inserts, 100_000);
        assert!(st.splits > 0 && st.model_nodes > 0);
    }

    /// Runs of keys whose spacing jumps between 1 and 64 every 512 keys.
    fn banded_keys(n: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
        let mut k = 1u64 << 40;
        let mut step = 1;
        (0..n)
            .map(|i| {
                if i % 512 == 0 {
                    step = if rng.random_bool(0.5) { 1 } else { 64 };
                }
                k += rng.random_range(1..=step);
                k
            })
            .collect()
    }

    #[test]
    fn banded_density_splits_into_pieces_and_keeps_shifts_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut keys = banded_keys(200_000, &mut rng);
        let sorted = keys.clone();
        for i in (1..keys.len()).rev() {
            keys.swap(i, rng.random_range(0..=i));
        }
        let idx = LearnedIndex::new();
        for (i, &k) in keys.iter().enumerate() {
            idx.upsert(k, i as u64 + 1, i as u64 + 1, &seq_id);
        }
        idx.check_invariants().unwrap();
        assert_eq!(idx.entries().iter().map(|e| e.0).collect::<Vec<_>>(), sorted);
        for &k in keys.iter().step_by(11) {
            assert!(idx.get(k).is_some());
        }
        let st = idx.stats();
        let mean = st.shifts as f64 / st.inserts as f64;
        assert!(mean < MAX_MEAN_SHIFTS as f64, "mean shifts {mean}");
    }

    #[test]
    fn sequential_and_reverse_inserts() {
        for rev in [false, true] {
            let idx = LearnedIndex::new();
            let keys: Vec<u64> = if rev { (0..70_000).rev().collect() } else { (0..70_000).collect() };
            for (i, &k) in keys.iter().enumerate() {
                idx.upsert(k, i as u64 + 1, i as u64 + 1, &seq_id);
            }
            idx.check_invariants().unwrap();
            assert_eq!(idx.entries().len(), 70_000);
        }
    }

    #[test]
    fn stale_versions_do_not_overwrite() {
        let idx = LearnedIndex::new();
        assert_eq!(idx.upsert(5, 10, 10, &seq_id), Upsert::NewKey);
        assert_eq!(idx.upsert(5, 3, 3, &seq_id), Upsert::Stale);
        assert_eq!(idx.get(5), Some(10));
        assert_eq!(idx.upsert(5, 11, 11, &seq_id), Upsert::Replaced);
        assert_eq!(idx.get(5), Some(11));
    }

    #[test]
    fn extreme_keys() {
        let idx = LearnedIndex::new();
        for (i, k) in [u64::MAX, 0, u64::MAX - 1, 1, u64::MAX / 2].into_iter().enumerate() {
            idx.upsert(k, i as u64 + 1, i as u64 + 1, &seq_id);
        }
        assert_eq!(idx.get(u64::MAX), Some(1));
        assert_eq!(idx.get(0), Some(2));
        assert_eq!(idx.entries().len(), 5);
        idx.check_invariants().unwrap();
        assert_eq!(idx.entries().last().unwrap().0, u64::MAX);
    }

    #[test]
    fn bulk_load_single_key_is_one_data_node() {
        let idx = LearnedIndex::bulk_load(&[42]).unwrap();
        let shape = idx.shape();
        assert_eq!(shape.data_nodes.len(), 1);
        assert!(shape.model_nodes.is_empty());
        assert_eq!(idx.probe_slot(42), Some(false));
        assert_eq!(idx.get(42), None);
    }

    #[test]
    fn bulk_load_then_reinsert_causes_no_structural_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut keys: Vec<u64> = (0..200_000).map(|_| rng.random::<u64>() >> 1).collect();
        keys.sort_unstable();
        keys.dedup();
        let idx = LearnedIndex::bulk_load(&keys).unwrap();
        idx.check_invariants().unwrap();
        for &k in &keys {
            assert_eq!(idx.probe_slot(k), Some(false));
        }
        let before = idx.shape();
        for (i, &k) in keys.iter().enumerate() {
            idx.upsert(k, i as u64 + 1, i as u64 + 1, &seq_id);
        }
        let st = idx.stats();
        assert_eq!((st.shifts, st.resizes), (0, 0));
        assert!(before.same_structure(&idx.shape()));
        assert_eq!(idx.entries().len(), keys.len());
    }

    #[test]
    fn structural_slots_are_reused_by_nearby_keys() {
        let keys: Vec<u64> = (0..10_000u64).map(|i| i * 100).collect();
        let idx = LearnedIndex::bulk_load(&keys).unwrap();
        for (i, &k) in keys.iter().enumerate() {
            idx.upsert(k + 50, i as u64 + 1, i as u64 + 1, &seq_id);
        }
        let st = idx.stats();
        assert_eq!((st.shifts, st.resizes), (0, 0));
        idx.check_invariants().unwrap();
        assert_eq!(idx.entries().len(), keys.len());
    }

    #[test]
    fn clustered_keys_split_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let idx = LearnedIndex::new();
        let mut oracle = BTreeMap::new();
        for seq in 1..=150_000u64 {
            let cluster = rng.random_range(0..12u64);
            let k = (cluster << 58) + rng.random_range(0..40_000u64);
            idx.upsert(k, seq, seq, &seq_id);
            oracle.insert(k, seq);
        }
        idx.check_invariants().unwrap();
        assert_eq!(idx.entries(), oracle.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn skeleton_tree_is_independent() {
        let keys: Vec<u64> = (0..50_000u64).map(|i| i * 7).collect();
        let src = LearnedIndex::bulk_load(&keys).unwrap();
        let a = LearnedIndex::from_tree(src.skeleton_tree());
        let b = LearnedIndex::from_tree(src.skeleton_tree());
        for i in 0..1000u64 {
            a.upsert(i * 7 + 3, i + 1, i + 1, &seq_id);
        }
        assert!(b.shape().same_structure(&src.shape()));
        assert!(!a.shape().same_structure(&b.shape()));
        assert_eq!(b.stats().inserts, 0);
    }

    #[test]
    fn concurrent_disjoint_writers() {
        let idx = Arc::new(LearnedIndex::new());
        let threads: Vec<_> = (0..16u64)
            .map(|t| {
                let idx = idx.clone();
                std::thread::spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(t);
                    for i in 0..8000u64 {
                        let k = rng.random_range(0..1u64 << 40) * 16 + t;
                        let seq = (t << 32) | (i + 1);
                        idx.upsert(k, seq, seq, &seq_id);
                        assert_eq!(idx.get(k), Some(seq));
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        idx.check_invariants().unwrap();
        assert_eq!(idx.stats().inserts, 16 * 8000);
    }
}
