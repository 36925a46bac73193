use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::Relaxed};
use std::sync::Arc;

use crate::config::SstIndexKind;
use crate::error::{Error, Result};
use crate::types::InternalRecord;

use super::block::Block;
use super::bloom::Bloom;
use super::cache::BlockCache;
use super::fence::{BlockIndex, Window};
use super::format::{Footer, Properties, FOOTER_LEN};
use super::io::{open_source, ReadAt};

/// Where a positive lookup found its record relative to the predicted block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolved {
    Middle,
    Left,
    Right,
    /// Outside the ±1 window; only reachable through a fallback read.
    Outside,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LookupTrace {
    pub bloom_negative: bool,
    pub window: Option<Window>,
    pub found_block: Option<usize>,
    pub resolved: Option<Resolved>,
    pub reads: u32,
    pub read_bytes: u64,
}

#[derive(Default)]
pub struct TableStats {
    pub lookups: AtomicU64,
    pub bloom_negatives: AtomicU64,
    pub data_reads: AtomicU64,
    pub data_read_bytes: AtomicU64,
    pub middle_hits: AtomicU64,
    pub left_hits: AtomicU64,
    pub right_hits: AtomicU64,
    pub outside_hits: AtomicU64,
    pub fallback_reads: AtomicU64,
}

/// An open, immutable SST with its Bloom filter and index pinned in memory.
pub struct Table {
    id: u64,
    path: PathBuf,
    source: Arc<dyn ReadAt>,
    bloom: Bloom,
    index: BlockIndex,
    props: Properties,
    footer: Footer,
    file_size: u64,
    cache: Option<Arc<BlockCache>>,
    stats: TableStats,
    obsolete: AtomicBool,
}

impl Table {
    pub fn open(path: &Path, id: u64, direct_io: bool, cache: Option<Arc<BlockCache>>) -> Result<Table> {
        let source = open_source(path, direct_io)?;
        Self::open_source(path, id, source, cache)
    }

    /// Opens a table over an arbitrary read source.
    pub fn open_source(
        path: &Path,
        id: u64,
        source: Arc<dyn ReadAt>,
        cache: Option<Arc<BlockCache>>,
    ) -> Result<Table> {
        let named = |e: Error| match e {
            Error::CorruptSst(_, m) => Error::CorruptSst(path.display().to_string(), m),
            other => other,
        };
        let file_size = source.size();
        if file_size < FOOTER_LEN as u64 {
            return Err(Error::CorruptSst(path.display().to_string(), "file too short"));
        }
        let mut fbuf = [0u8; FOOTER_LEN];
        source.read_exact_at(&mut fbuf, file_size - FOOTER_LEN as u64)?;
        let footer = Footer::decode(&fbuf, file_size).map_err(named)?;
        let meta_start = footer.meta_start();
        let mut meta = vec![0u8; (footer.meta_end() - meta_start) as usize];
        source.read_exact_at(&mut meta, meta_start)?;
        if crc32fast::hash(&meta) != footer.meta_crc {
            return Err(Error::ChecksumMismatch("sst metadata"));
        }
        let local = |r: super::format::Region| {
            let s = (r.offset - meta_start) as usize;
            s..s + r.length as usize
        };
        let bloom = Bloom::deserialize(&meta[local(footer.bloom)]).map_err(named)?;
        let index = BlockIndex::deserialize(&meta[local(footer.index)], &meta[local(footer.offsets)]).map_err(named)?;
        let props = Properties::decode(&meta[local(footer.props)]).map_err(named)?;
        let last = index.handles().last().map_or(0, |h| h.end());
        if index.block_count() as u64 != props.block_count
            || props.data_end != meta_start
            || last != props.data_end
            || index.kind() != props.index_kind
        {
            return Err(Error::CorruptSst(path.display().to_string(), "inconsistent metadata"));
        }
        Ok(Table {
            id,
            path: path.to_path_buf(),
            source,
            bloom,
            index,
            props,
            footer,
            file_size,
            cache,
            stats: TableStats::default(),
            obsolete: AtomicBool::new(false),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn props(&self) -> &Properties {
        &self.props
    }

    pub fn footer(&self) -> &Footer {
        &self.footer
    }

    pub fn file_size(&self) -> u64 {
        self.file_size
    }

    pub fn index(&self) -> &BlockIndex {
        &self.index
    }

    pub fn bloom(&self) -> &Bloom {
        &self.bloom
    }

    pub fn stats(&self) -> &TableStats {
        &self.stats
    }

    /// Bytes of the serialized index and block-offsets regions.
    pub fn index_bytes(&self) -> u64 {
        u64::from(self.footer.index.length) + u64::from(self.footer.offsets.length)
    }

    pub fn min_key(&self) -> u64 {
        self.props.min_key
    }

    pub fn max_key(&self) -> u64 {
        self.props.max_key
    }

    /// Deletes the file once the last reference is dropped.
    pub fn mark_obsolete(&self) {
        self.obsolete.store(true, Relaxed);
    }

    fn read_range(&self, first: usize, last: usize, trace: &mut LookupTrace) -> Result<Vec<Arc<Block>>> {
        let handles = self.index.handles();
        let start = handles[first].offset;
        let end = handles[last].end();
        let mut buf = vec![0u8; (end - start) as usize];
        self.source.read_exact_at(&mut buf, start)?;
        trace.reads += 1;
        trace.read_bytes += buf.len() as u64;
        self.stats.data_reads.fetch_add(1, Relaxed);
        self.stats.data_read_bytes.fetch_add(buf.len() as u64, Relaxed);
        let mut blocks = Vec::with_capacity(last - first + 1);
        for (i, h) in handles[first..=last].iter().enumerate() {
            let s = (h.offset - start) as usize;
            let b = Arc::new(Block::decode(buf[s..s + h.length as usize].to_vec())?);
            if let Some(c) = &self.cache {
                c.insert(self.id, (first + i) as u32, b.clone());
            }
            blocks.push(b);
        }
        Ok(blocks)
    }

    fn cached(&self, i: usize) -> Option<Arc<Block>> {
        self.cache.as_ref().and_then(|c| c.get(self.id, i as u32))
    }

    fn block(&self, i: usize, trace: &mut LookupTrace) -> Result<Arc<Block>> {
        match self.cached(i) {
            Some(b) => Ok(b),
            None => Ok(self.read_range(i, i, trace)?.pop().unwrap()),
        }
    }

    pub fn get(&self, key: u64) -> Result<Option<InternalRecord>> {
        self.get_traced(key).map(|(r, _)| r)
    }

    /// Point lookup that also reports the I/O it issued and where the record
    /// was found.
    pub fn get_traced(&self, key: u64) -> Result<(Option<InternalRecord>, LookupTrace)> {
        self.stats.lookups.fetch_add(1, Relaxed);
        let mut trace = LookupTrace::default();
        if !self.bloom.may_contain(key) {
            self.stats.bloom_negatives.fetch_add(1, Relaxed);
            trace.bloom_negative = true;
            return Ok((None, trace));
        }
        let found = match &self.index {
            BlockIndex::Table(t) => {
                let i = t.locate(key);
                let b = self.block(i, &mut trace)?;
                b.search(key)?.map(|r| (r.to_owned(), i))
            }
            BlockIndex::Pgm(f) => {
                let w = f.window(key);
                trace.window = Some(w);
                self.window_lookup(key, w, &mut trace)?
            }
        };
        let Some((rec, at)) = found else {
            return Ok((None, trace));
        };
        trace.found_block = Some(at);
        let resolved = match trace.window {
            None => Resolved::Middle,
            Some(w) if at == w.predicted => Resolved::Middle,
            Some(w) if at + 1 == w.predicted => Resolved::Left,
            Some(w) if at == w.predicted + 1 => Resolved::Right,
            Some(_) => Resolved::Outside,
        };
        match resolved {
            Resolved::Middle => &self.stats.middle_hits,
            Resolved::Left => &self.stats.left_hits,
            Resolved::Right => &self.stats.right_hits,
            Resolved::Outside => &self.stats.outside_hits,
        }
        .fetch_add(1, Relaxed);
        trace.resolved = Some(resolved);
        Ok((Some(rec), trace))
    }

    fn window_lookup(&self, key: u64, w: Window, trace: &mut LookupTrace) -> Result<Option<(InternalRecord, usize)>> {
        let p = w.predicted;
        // Blocks of the window, filled lazily from the cache or all at once
        // with a single contiguous read.
        let mut slots: Vec<Option<Arc<Block>>> = (w.start..=w.end).map(|_| None).collect();
        let get = |i: usize, slots: &mut Vec<Option<Arc<Block>>>, trace: &mut LookupTrace| -> Result<Arc<Block>> {
            let s = i - w.start;
            if slots[s].is_none() {
                slots[s] = self.cached(i);
            }
            if slots[s].is_none() {
                if trace.reads == 0 {
                    for (j, b) in self.read_range(w.start, w.end, trace)?.into_iter().enumerate() {
                        slots[j] = Some(b);
                    }
                } else {
                    slots[s] = Some(self.read_range(i, i, trace)?.pop().unwrap());
                }
            }
            Ok(slots[s].clone().unwrap())
        };
        let mid = get(p, &mut slots, trace)?;
        if let Some(r) = mid.search(key)? {
            return Ok(Some((r.to_owned(), p)));
        }
        let Some(first) = mid.first_key() else {
            return Ok(None);
        };
        if key < first {
            let mut i = p;
            while i > w.start {
                i -= 1;
                let b = get(i, &mut slots, trace)?;
                if b.first_key().is_some_and(|f| f <= key) {
                    return Ok(b.search(key)?.map(|r| (r.to_owned(), i)));
                }
            }
            // Only a mispredicted window can leave earlier blocks unread.
            while i > 0 {
                i -= 1;
                self.stats.fallback_reads.fetch_add(1, Relaxed);
                let b = self.block(i, trace)?;
                if b.first_key().is_some_and(|f| f <= key) {
                    return Ok(b.search(key)?.map(|r| (r.to_owned(), i)));
                }
            }
            return Ok(None);
        }
        if mid.last_key().is_some_and(|l| key > l) && p < w.end {
            let b = get(p + 1, &mut slots, trace)?;
            if b.first_key().is_some_and(|f| f <= key) {
                return Ok(b.search(key)?.map(|r| (r.to_owned(), p + 1)));
            }
        }
        Ok(None)
    }

    /// Index of the block from which a forward scan starting at `key` must
    /// begin.
    fn seek_block(&self, key: u64) -> Result<usize> {
        match &self.index {
            BlockIndex::Table(t) => Ok(t.locate(key)),
            BlockIndex::Pgm(f) => {
                let mut i = f.window(key).start;
                let mut trace = LookupTrace::default();
                while i > 0 {
                    let b = self.block(i, &mut trace)?;
                    if b.first_key().is_some_and(|fk| fk <= key) {
                        break;
                    }
                    i -= 1;
                }
                Ok(i)
            }
        }
    }

    pub fn iter(self: &Arc<Self>) -> TableIter {
        TableIter::new(self.clone(), 0, None, SCAN_BATCH_BLOCKS)
    }

    /// Records with key >= `lo`, in order.
    pub fn iter_from(self: &Arc<Self>, lo: u64) -> Result<TableIter> {
        let b = self.seek_block(lo)?;
        Ok(TableIter::new(self.clone(), b, Some(lo), SEEK_BATCH_BLOCKS))
    }

    /// Human-readable description of the file layout.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let f = &self.footer;
        let p = &self.props;
        let _ = writeln!(s, "file          {} ({} bytes)", self.path.display(), self.file_size);
        let _ = writeln!(s, "data blocks   [0, {}) {} blocks, max block {} bytes", p.data_end, p.block_count, p.max_block_len);
        let _ = writeln!(s, "bloom         [{}, +{}) k={} bits={}", f.bloom.offset, f.bloom.length, self.bloom.probes(), self.bloom.bit_len());
        let _ = writeln!(s, "index         [{}, +{}) {:?}", f.index.offset, f.index.length, p.index_kind);
        if let BlockIndex::Pgm(fi) = &self.index {
            let m = fi.model();
            let per_level: Vec<usize> = m.levels().iter().map(Vec::len).collect();
            let _ = writeln!(s, "  pgm         epsilon={} keys={} segments/level={:?}", m.epsilon(), m.key_count(), per_level);
        }
        let _ = writeln!(s, "block offsets [{}, +{})", f.offsets.offset, f.offsets.length);
        let _ = writeln!(s, "properties    [{}, +{})", f.props.offset, f.props.length);
        let _ = writeln!(s, "footer        [{}, +{})", self.file_size - FOOTER_LEN as u64, FOOTER_LEN);
        let _ = writeln!(
            s,
            "records       {} (tombstones {}), keys [{}, {}], max seq {}",
            p.record_count, p.tombstones, p.min_key, p.max_key, p.max_seq
        );
        let kind = match p.index_kind {
            SstIndexKind::PgmFence => "pgm-fence",
            SstIndexKind::FenceTableBaseline => "fence-table",
        };
        let _ = writeln!(s, "index bytes   {} ({kind})", self.index_bytes());
        s
    }
}

impl Drop for Table {
    fn drop(&mut self) {
        if self.obsolete.load(Relaxed) {
            if let Err(e) = std::fs::remove_file(&self.path) {
                log::warn!("failed to delete {}: {e}", self.path.display());
            }
        }
    }
}

/// Blocks fetched per read during sequential scans.
const SCAN_BATCH_BLOCKS: usize = 64;
/// First read of a seeking iterator; doubles up to [`SCAN_BATCH_BLOCKS`].
const SEEK_BATCH_BLOCKS: usize = 2;

/// Forward iterator over a table's records. Scans bypass the block cache.
pub struct TableIter {
    table: Arc<Table>,
    next_block: usize,
    blocks: Vec<Block>,
    block_pos: usize,
    rec_pos: usize,
    lo: Option<u64>,
    batch: usize,
    failed: bool,
}

impl TableIter {
    fn new(table: Arc<Table>, start: usize, lo: Option<u64>, batch: usize) -> Self {
        TableIter {
            table,
            next_block: start,
            blocks: Vec::new(),
            block_pos: 0,
            rec_pos: 0,
            lo,
            batch,
            failed: false,
        }
    }

    fn refill(&mut self) -> Result<bool> {
        let handles = self.table.index.handles();
        if self.next_block >= handles.len() {
            return Ok(false);
        }
        let last = (self.next_block + self.batch).min(handles.len()) - 1;
        self.batch = (self.batch * 2).min(SCAN_BATCH_BLOCKS);
        let start = handles[self.next_block].offset;
        let mut buf = vec![0u8; (handles[last].end() - start) as usize];
        self.table.source.read_exact_at(&mut buf, start)?;
        self.blocks.clear();
        for h in &handles[self.next_block..=last] {
            let s = (h.offset - start) as usize;
            self.blocks.push(Block::decode(buf[s..s + h.length as usize].to_vec())?);
        }
        self.next_block = last + 1;
        self.block_pos = 0;
        self.rec_pos = 0;
        Ok(true)
    }
}

impl Iterator for TableIter {
    type Item = Result<InternalRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            while self.block_pos < self.blocks.len() {
                let b = &self.blocks[self.block_pos];
                if let Some(lo) = self.lo.take() {
                    self.rec_pos = b.lower_bound(lo);
                    if self.rec_pos == b.len() {
                        self.lo = Some(lo);
                    }
                }
                if self.rec_pos < b.len() {
                    let r = b.record_at(self.rec_pos).map(|r| r.to_owned());
                    self.rec_pos += 1;
                    if r.is_err() {
                        self.failed = true;
                    }
                    return Some(r);
                }
                self.block_pos += 1;
                self.rec_pos = 0;
            }
            match self.refill() {
                Ok(true) => {}
                Ok(false) => return None,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sst::builder::{build_sst, SstOptions};
    use crate::sst::io::{CountingReader, FileSource};
    use crate::types::{OpKind, UserKey};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts(kind: SstIndexKind) -> SstOptions {
        SstOptions {
            index_kind: kind,
            ..SstOptions::default()
        }
    }

    fn records(n: usize, seed: u64) -> Vec<InternalRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys: Vec<u64> = (0..n).map(|_| rng.random_range(0..u64::MAX / 2) * 2).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.iter()
            .map(|&k| {
                if rng.random_ratio(1, 20) {
                    InternalRecord::delete(k, rng.random_range(1..1000))
                } else {
                    let len = rng.random_range(10..200);
                    InternalRecord::put(k, rng.random_range(1..1000), vec![(k % 251) as u8; len])
                }
            })
            .collect()
    }

    fn open_counted(path: &Path, cache: Option<Arc<BlockCache>>) -> (Arc<Table>, Arc<CountingReader>) {
        let counter = Arc::new(CountingReader::new(Arc::new(FileSource::open(path).unwrap())));
        let t = Table::open_source(path, 1, counter.clone(), cache).unwrap();
        counter.take_log();
        (Arc::new(t), counter)
    }

    #[test]
    fn one_record_one_block() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        let r = InternalRecord::put(5u64, 9, b"five".to_vec());
        let info = build_sst(&path, [&r], SstOptions::default()).unwrap().unwrap();
        assert_eq!((info.props.block_count, info.props.record_count), (1, 1));
        let t = Table::open(&path, 1, false, None).unwrap();
        assert_eq!(t.get(5).unwrap(), Some(r));
        assert_eq!(t.get(6).unwrap(), None);
    }

    #[test]
    fn three_records_per_block() {
        // 20-byte header + 380-byte value = 400 bytes: 3 * 404 + 8 fits in
        // 1365 bytes, 4 * 404 + 8 does not.
        let recs: Vec<_> = (0..9u64).map(|k| InternalRecord::put(k, 1, vec![7u8; 380])).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        let info = build_sst(&path, &recs, SstOptions::default()).unwrap().unwrap();
        assert_eq!(info.props.block_count, 3);
        let t = Table::open(&path, 1, false, None).unwrap();
        assert_eq!(t.index().block_count(), 3);
        if let BlockIndex::Pgm(f) = t.index() {
            assert_eq!(f.model().key_count(), 3);
        }
        assert!(t.index().handles().iter().all(|h| h.length <= 1365));
    }

    #[test]
    fn empty_input_writes_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        assert!(build_sst(&path, &[], SstOptions::default()).unwrap().is_none());
        assert!(!path.exists());
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        let recs = [InternalRecord::put(2u64, 1, vec![]), InternalRecord::put(2u64, 2, vec![])];
        assert!(matches!(build_sst(&path, &recs, SstOptions::default()), Err(Error::NotSorted(1))));
        assert!(!path.exists());
    }

    #[test]
    fn round_trip_enumerates_input() {
        for kind in [SstIndexKind::PgmFence, SstIndexKind::FenceTableBaseline] {
            let recs = records(20_000, 1);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("1.sst");
            build_sst(&path, &recs, opts(kind)).unwrap();
            let t = Arc::new(Table::open(&path, 1, false, None).unwrap());
            let back: Vec<_> = t.iter().collect::<Result<_>>().unwrap();
            assert_eq!(back, recs);
            assert_eq!(t.props().tombstones as usize, recs.iter().filter(|r| r.kind == OpKind::Delete).count());
        }
    }

    #[test]
    fn single_read_window_lookups() {
        let recs = records(100_000, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        build_sst(&path, &recs, SstOptions::default()).unwrap();
        let (t, counter) = open_counted(&path, None);
        let max_block = t.props().max_block_len as usize;
        let BlockIndex::Pgm(fence) = t.index() else { panic!() };
        let handles = fence.handles().to_vec();
        let block_of = |pos: u64| handles.partition_point(|h| h.offset <= pos) - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in &recs {
            let (got, trace) = t.get_traced(r.key.0).unwrap();
            assert_eq!(got.as_ref(), Some(r));
            let log = counter.take_log();
            assert_eq!(log.len(), 1);
            assert!(log[0].1 <= 3 * max_block);
            let w = trace.window.unwrap();
            let found = trace.found_block.unwrap();
            assert!(w.start <= found && found <= w.end);
            assert_eq!(block_of(log[0].0), w.start);
        }
        for _ in 0..20_000 {
            let q = rng.random::<u64>() | 1;
            assert_eq!(t.get(q).unwrap(), None);
            let log = counter.take_log();
            assert!(log.len() <= 1 && log.iter().all(|&(_, l)| l <= 3 * max_block));
        }
        assert_eq!(t.stats().fallback_reads.load(Relaxed), 0);
        assert_eq!(t.stats().outside_hits.load(Relaxed), 0);
    }

    #[test]
    fn out_of_range_lookup_uses_clamped_window() {
        let recs: Vec<_> = (100..2000u64).map(|k| InternalRecord::put(k, 1, vec![1u8; 50])).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        build_sst(&path, &recs, SstOptions::default()).unwrap();
        let (t, counter) = open_counted(&path, None);
        for q in [0u64, 50, 99, 5000, u64::MAX] {
            assert_eq!(t.get(q).unwrap(), None);
            assert!(counter.take_log().len() <= 1);
        }
    }

    #[test]
    fn fence_table_reads_exactly_one_block() {
        let recs = records(30_000, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        build_sst(&path, &recs, opts(SstIndexKind::FenceTableBaseline)).unwrap();
        let (t, counter) = open_counted(&path, None);
        let BlockIndex::Table(ft) = t.index() else { panic!() };
        let handles = ft.handles().to_vec();
        for r in &recs {
            assert_eq!(t.get(r.key.0).unwrap().as_ref(), Some(r));
            let log = counter.take_log();
            assert_eq!(log.len(), 1);
            let h = handles[ft.locate(r.key.0)];
            assert_eq!(log[0], (h.offset, h.length as usize));
        }
    }

    #[test]
    fn index_kinds_agree() {
        let recs = records(20_000, 5);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.sst");
        let b = dir.path().join("b.sst");
        build_sst(&a, &recs, opts(SstIndexKind::PgmFence)).unwrap();
        build_sst(&b, &recs, opts(SstIndexKind::FenceTableBaseline)).unwrap();
        let ta = Table::open(&a, 1, false, None).unwrap();
        let tb = Table::open(&b, 2, true, None).unwrap();
        assert!(ta.index_bytes() < tb.index_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20_000 {
            let q = if rng.random_bool(0.5) {
                recs[rng.random_range(0..recs.len())].key.0
            } else {
                rng.random()
            };
            assert_eq!(ta.get(q).unwrap(), tb.get(q).unwrap());
        }
    }

    #[test]
    fn cached_blocks_avoid_reads() {
        let recs = records(5000, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        build_sst(&path, &recs, SstOptions::default()).unwrap();
        let cache = Arc::new(BlockCache::new(64 << 20));
        let (t, counter) = open_counted(&path, Some(cache.clone()));
        for r in &recs {
            t.get(r.key.0).unwrap();
            assert!(counter.take_log().len() <= 1);
        }
        let before = counter.reads();
        for r in &recs {
            assert_eq!(t.get(r.key.0).unwrap().as_ref(), Some(r));
        }
        assert_eq!(counter.reads(), before);
        assert!(cache.hits() > 0);
    }

    #[test]
    fn iter_from_matches_oracle() {
        let recs = records(20_000, 8);
        let dir = tempfile::tempdir().unwrap();
        for kind in [SstIndexKind::PgmFence, SstIndexKind::FenceTableBaseline] {
            let path = dir.path().join(format!("{kind:?}.sst"));
            build_sst(&path, &recs, opts(kind)).unwrap();
            let t = Arc::new(Table::open(&path, 1, false, None).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..200 {
                let lo = if rng.random_bool(0.5) {
                    recs[rng.random_range(0..recs.len())].key.0
                } else {
                    rng.random()
                };
                let got: Vec<UserKey> = t.iter_from(lo).unwrap().take(50).map(|r| r.unwrap().key).collect();
                let want: Vec<UserKey> = recs.iter().filter(|r| r.key.0 >= lo).take(50).map(|r| r.key).collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn corruption_is_reported() {
        let recs = records(2000, 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        build_sst(&path, &recs, SstOptions::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(Table::open(&path, 1, false, None).is_err());
        bytes[n - 100] ^= 0xff;
        bytes[10] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let t = Table::open(&path, 1, false, None).unwrap();
        assert!(matches!(t.get(recs[0].key.0), Err(Error::ChecksumMismatch(_))));
        std::fs::write(&path, &bytes[..40]).unwrap();
        assert!(Table::open(&path, 1, false, None).is_err());
    }

    #[test]
    fn obsolete_tables_are_deleted_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        build_sst(&path, &records(10, 11), SstOptions::default()).unwrap();
        let t = Arc::new(Table::open(&path, 1, false, None).unwrap());
        let reader = t.clone();
        t.mark_obsolete();
        drop(t);
        assert!(path.exists());
        drop(reader);
        assert!(!path.exists());
    }

    #[test]
    fn describe_lists_regions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.sst");
        build_sst(&path, &records(1000, 12), SstOptions::default()).unwrap();
        let s = crate::sst::dump(&path).unwrap();
        for part in ["data blocks", "bloom", "pgm", "block offsets", "properties", "footer"] {
            assert!(s.contains(part), "{s}");
        }
    }
}
