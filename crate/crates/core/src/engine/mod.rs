//! The LSM engine: write path, read path across memtables and levels,
//! memtable rotation with skeleton reuse, background flush and leveled
//! compaction, manifest and write-ahead log.

pub mod compaction;
pub mod manifest;
pub mod version;
pub mod wal;

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::Relaxed, Ordering::SeqCst};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, MutexGuard, RwLock};

use crate::config::{EngineConfig, MemtableIndexKind};
use crate::error::{Error, Result};
use crate::memtable::Memtable;
use crate::skeleton::SkeletonPolicy;
use crate::sst::{BlockCache, SstBuilder, SstOptions, Table};
use crate::types::{InternalRecord, OpKind, UserKey, MAX_VALUE_LEN};

use compaction::{Job, MergeIter, Source};
use manifest::{Edit, Manifest};
use version::{LevelIter, ReadCounters, Version};
use wal::{parse_wal_name, wal_path, WalWriter};

/// Flushes wait while L0 holds this many times the compaction trigger.
const L0_STOP_FACTOR: usize = 5;
const FLUSH_RETRIES: u32 = 5;
const SCAN_CHUNK: usize = 256;

pub fn sst_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id:06}.sst"))
}

fn parse_sst_name(name: &str) -> Option<u64> {
    name.strip_suffix(".sst")?.parse().ok()
}

fn nanos(d: Duration) -> u64 {
    d.as_nanos() as u64
}

/// A consistent view of everything readable: swapped atomically on
/// rotation, flush and compaction.
pub struct SuperVersion {
    pub active: Arc<Memtable>,
    /// Newest first.
    pub imms: Vec<Arc<Memtable>>,
    pub version: Arc<Version>,
}

struct WriteState {
    active: Arc<Memtable>,
    wal: Option<WalWriter>,
    last_seq: u64,
}

struct FlushJob {
    mem: Arc<Memtable>,
    refresh: bool,
}

#[derive(Default)]
struct FlushQueue {
    jobs: VecDeque<FlushJob>,
    busy: bool,
}

#[derive(Default)]
struct CompactionState {
    busy: HashSet<u64>,
    queue: VecDeque<Job>,
    running: usize,
}

#[derive(Default)]
struct Counters {
    puts: AtomicU64,
    deletes: AtomicU64,
    gets: AtomicU64,
    scans: AtomicU64,
    rotations: AtomicU64,
    warm_memtables: AtomicU64,
    stalls: AtomicU64,
    stall_ns: AtomicU64,
    flushes: AtomicU64,
    flush_ns: AtomicU64,
    flush_bytes: AtomicU64,
    index_train_ns: AtomicU64,
    skeleton_refreshes: AtomicU64,
    skeleton_ns: AtomicU64,
    skeleton_copy_ns: AtomicU64,
    memtable_shifts: AtomicU64,
    memtable_resizes: AtomicU64,
    memtable_splits: AtomicU64,
    compactions: AtomicU64,
    compaction_ns: AtomicU64,
    compaction_bytes_in: AtomicU64,
    compaction_bytes_out: AtomicU64,
    compaction_failures: AtomicU64,
}

/// Point-in-time engine counters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EngineStats {
    pub puts: u64,
    pub deletes: u64,
    pub gets: u64,
    pub scans: u64,
    pub rotations: u64,
    /// Memtables started from a skeleton.
    pub warm_memtables: u64,
    pub stalls: u64,
    pub stall_ns: u64,
    pub flushes: u64,
    /// Wall time of flush jobs (SST build, fsync, install), excluding
    /// skeleton work.
    pub flush_ns: u64,
    pub flush_bytes: u64,
    pub index_train_ns: u64,
    pub skeleton_refreshes: u64,
    pub skeleton_ns: u64,
    pub skeleton_copy_ns: u64,
    pub memtable_shifts: u64,
    pub memtable_resizes: u64,
    pub memtable_splits: u64,
    pub compactions: u64,
    pub compaction_ns: u64,
    pub compaction_bytes_in: u64,
    pub compaction_bytes_out: u64,
    pub compaction_failures: u64,
    pub table_probes: u64,
    pub bloom_negatives: u64,
    pub data_reads: u64,
    pub data_read_bytes: u64,
    pub middle_hits: u64,
    pub left_hits: u64,
    pub right_hits: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// `(files, bytes)` per level.
    pub levels: Vec<(usize, u64)>,
    /// Serialized index bytes over all live SSTs.
    pub index_bytes: u64,
    pub sst_bytes: u64,
}

struct Inner {
    dir: PathBuf,
    cfg: EngineConfig,
    write: Mutex<WriteState>,
    stall_cv: Condvar,
    sv: RwLock<Arc<SuperVersion>>,
    next_file: AtomicU64,
    manifest: Mutex<Manifest>,
    policy: SkeletonPolicy,
    cache: Option<Arc<BlockCache>>,
    flush: Mutex<FlushQueue>,
    flush_cv: Condvar,
    flush_done_cv: Condvar,
    comp: Mutex<CompactionState>,
    comp_cv: Condvar,
    comp_done_cv: Condvar,
    counters: Counters,
    reads: ReadCounters,
    bg_error: Mutex<Option<Error>>,
    shutdown: AtomicBool,
}

pub struct Engine {
    inner: Arc<Inner>,
    threads: Vec<JoinHandle<()>>,
}

/// Lazily pages through a memtable range.
struct MemSource {
    mem: Arc<Memtable>,
    next: Option<u64>,
    hi: u64,
    /// Records fetched per page; doubles up to [`SCAN_CHUNK`].
    chunk: usize,
    buf: std::vec::IntoIter<InternalRecord>,
}

impl Iterator for MemSource {
    type Item = Result<InternalRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(r) = self.buf.next() {
                return Some(Ok(r));
            }
            let lo = self.next?;
            let want = self.chunk;
            self.chunk = (want * 2).min(SCAN_CHUNK);
            let chunk = self.mem.range_limit(UserKey(lo), UserKey(self.hi), want);
            self.next = match chunk.last() {
                Some(last) if chunk.len() == want => last.key.0.checked_add(1),
                _ => None,
            };
            self.buf = chunk.into_iter();
        }
    }
}

impl Inner {
    fn new_memtable(&self, id: u64) -> Memtable {
        match self.cfg.memtable_index {
            MemtableIndexKind::SkipListBaseline => Memtable::new(id, MemtableIndexKind::SkipListBaseline, self.cfg.memtable_budget_bytes),
            MemtableIndexKind::Learned => self.policy.instantiate(id, MemtableIndexKind::Learned, self.cfg.memtable_budget_bytes),
        }
    }

    fn check_bg(&self) -> Result<()> {
        if self.shutdown.load(SeqCst) {
            return Err(Error::Closed);
        }
        match &*self.bg_error.lock() {
            Some(e) => Err(Error::Background(e.to_string())),
            None => Ok(()),
        }
    }

    fn current(&self) -> Arc<SuperVersion> {
        self.sv.read().clone()
    }

    fn open_table(&self, id: u64) -> Result<Arc<Table>> {
        Ok(Arc::new(Table::open(&sst_path(&self.dir, id), id, self.cfg.direct_io, self.cache.clone())?))
    }

    fn write(&self, key: u64, kind: OpKind, value: &[u8]) -> Result<()> {
        if value.len() > MAX_VALUE_LEN {
            return Err(Error::ValueTooLarge(value.len()));
        }
        self.check_bg()?;
        let mut ws = self.write.lock();
        loop {
            let mem = ws.active.clone();
            let seq = ws.last_seq + 1;
            match mem.begin_insert(UserKey(key), seq, kind, value) {
                Ok(handle) => {
                    if let Some(w) = ws.wal.as_mut() {
                        if let Err(e) = w.append(UserKey(key), seq, kind, value) {
                            mem.abort_insert();
                            return Err(e);
                        }
                    }
                    ws.last_seq = seq;
                    drop(ws);
                    mem.finish_insert(UserKey(key), seq, handle);
                    return Ok(());
                }
                Err(Error::MemtableFull) => self.rotate(&mut ws)?,
                Err(e) => return Err(e),
            }
        }
    }

    /// Freezes the active memtable, queues it for flush and installs a new
    /// one. Blocks while the immutable queue is full.
    fn rotate(&self, ws: &mut MutexGuard<'_, WriteState>) -> Result<()> {
        let limit = self.cfg.num_memtables - 1;
        if self.current().imms.len() >= limit {
            let started = Instant::now();
            self.counters.stalls.fetch_add(1, Relaxed);
            while self.current().imms.len() >= limit {
                self.check_bg()?;
                if self.cfg.stall_timeout.is_some_and(|t| started.elapsed() >= t) {
                    self.counters.stall_ns.fetch_add(nanos(started.elapsed()), Relaxed);
                    return Err(Error::Stalled);
                }
                self.stall_cv.wait_for(ws, Duration::from_millis(20));
            }
            self.counters.stall_ns.fetch_add(nanos(started.elapsed()), Relaxed);
        }
        let old = ws.active.clone();
        old.freeze();
        let refresh = self.cfg.memtable_index == MemtableIndexKind::Learned && self.policy.on_flush();
        let id = self.next_file.fetch_add(1, SeqCst);
        let wal = if self.cfg.wal_enabled {
            Some(WalWriter::create(&wal_path(&self.dir, id), self.cfg.sync_wal)?)
        } else {
            None
        };
        let fresh = Arc::new(self.new_memtable(id));
        if fresh.from_skeleton() {
            self.counters.warm_memtables.fetch_add(1, Relaxed);
        }
        {
            let mut sv = self.sv.write();
            let mut imms = Vec::with_capacity(sv.imms.len() + 1);
            imms.push(old.clone());
            imms.extend(sv.imms.iter().cloned());
            *sv = Arc::new(SuperVersion {
                active: fresh.clone(),
                imms,
                version: sv.version.clone(),
            });
        }
        ws.active = fresh;
        ws.wal = wal;
        self.counters.rotations.fetch_add(1, Relaxed);
        self.flush.lock().jobs.push_back(FlushJob { mem: old, refresh });
        self.flush_cv.notify_all();
        Ok(())
    }

    /// Writes `mem` to a new L0 table and installs it. With `advance_log`,
    /// WAL segments older than every unflushed memtable become obsolete.
    fn flush_memtable(&self, mem: &Arc<Memtable>, advance_log: bool) -> Result<()> {
        let id = self.next_file.fetch_add(1, SeqCst);
        let path = sst_path(&self.dir, id);
        let mut b = SstBuilder::create(&path, SstOptions::from_config(&self.cfg))?;
        for r in mem.iter() {
            if let Err(e) = b.add(r) {
                b.abandon();
                return Err(e);
            }
        }
        let info = b.finish()?;
        let table = match &info {
            Some(i) => {
                self.counters.index_train_ns.fetch_add(nanos(i.index_train_time), Relaxed);
                self.counters.flush_bytes.fetch_add(i.file_size, Relaxed);
                Some(self.open_table(id)?)
            }
            None => None,
        };
        let mut man = self.manifest.lock();
        let mut edits = Vec::new();
        if let Some(t) = &table {
            edits.push(Edit::AddFile { level: 0, id });
            edits.push(Edit::LastSeq(t.props().max_seq));
        }
        edits.push(Edit::NextFile(self.next_file.load(SeqCst)));
        if advance_log {
            let cur = self.current();
            let min_live = cur
                .imms
                .iter()
                .filter(|m| !Arc::ptr_eq(m, mem))
                .map(|m| m.id())
                .chain([cur.active.id()])
                .min()
                .unwrap();
            edits.push(Edit::LogNumber(min_live));
        }
        man.append(&edits)?;
        {
            let mut sv = self.sv.write();
            let added: Vec<(usize, Arc<Table>)> = table.into_iter().map(|t| (0, t)).collect();
            *sv = Arc::new(SuperVersion {
                active: sv.active.clone(),
                imms: sv.imms.iter().filter(|m| !Arc::ptr_eq(m, mem)).cloned().collect(),
                version: Arc::new(sv.version.apply(&HashSet::new(), &added)),
            });
        }
        drop(man);
        if advance_log {
            match fs::remove_file(wal_path(&self.dir, mem.id())) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        let st = mem.stats();
        self.counters.memtable_shifts.fetch_add(st.shifts, Relaxed);
        self.counters.memtable_resizes.fetch_add(st.resizes, Relaxed);
        self.counters.memtable_splits.fetch_add(st.splits, Relaxed);
        self.stall_cv.notify_all();
        Ok(())
    }

    fn flush_loop(self: Arc<Self>) {
        loop {
            let job = {
                let mut q = self.flush.lock();
                loop {
                    if self.shutdown.load(SeqCst) {
                        return;
                    }
                    if let Some(j) = q.jobs.pop_front() {
                        q.busy = true;
                        break j;
                    }
                    self.flush_cv.wait(&mut q);
                }
            };
            self.wait_for_l0_room();
            let started = Instant::now();
            let mut attempt = 0;
            loop {
                match self.flush_memtable(&job.mem, true) {
                    Ok(()) => break,
                    Err(e) => {
                        attempt += 1;
                        log::error!("flush of memtable {} failed (attempt {attempt}): {e}", job.mem.id());
                        if attempt >= FLUSH_RETRIES || self.shutdown.load(SeqCst) {
                            *self.bg_error.lock() = Some(e);
                            break;
                        }
                        std::thread::sleep(Duration::from_millis(20 << attempt));
                    }
                }
            }
            self.counters.flush_ns.fetch_add(nanos(started.elapsed()), Relaxed);
            self.counters.flushes.fetch_add(1, Relaxed);
            if job.refresh {
                let t = Instant::now();
                if self.policy.refresh_from(&job.mem) {
                    self.counters.skeleton_refreshes.fetch_add(1, Relaxed);
                }
                self.counters.skeleton_ns.fetch_add(nanos(t.elapsed()), Relaxed);
            }
            if self.cfg.memtable_index == MemtableIndexKind::Learned {
                let t = Instant::now();
                self.policy.prepare_spare();
                self.counters.skeleton_copy_ns.fetch_add(nanos(t.elapsed()), Relaxed);
            }
            drop(job);
            {
                let mut q = self.flush.lock();
                q.busy = false;
                self.flush_done_cv.notify_all();
            }
            self.schedule_compactions();
        }
    }

    fn wait_for_l0_room(&self) {
        if !self.cfg.auto_compaction {
            return;
        }
        let stop = self.cfg.l0_compaction_trigger * L0_STOP_FACTOR;
        while self.current().version.files(0).len() >= stop && !self.shutdown.load(SeqCst) {
            self.schedule_compactions();
            let mut st = self.comp.lock();
            self.comp_done_cv.wait_for(&mut st, Duration::from_millis(20));
        }
    }

    fn schedule_compactions(&self) {
        if !self.cfg.auto_compaction || self.shutdown.load(SeqCst) {
            return;
        }
        let mut st = self.comp.lock();
        while st.running + st.queue.len() < self.cfg.compaction_workers {
            let v = self.current().version.clone();
            match compaction::pick(&v, &self.cfg, &st.busy) {
                Some(job) => {
                    let ids: Vec<u64> = job.file_ids().collect();
                    st.busy.extend(ids);
                    st.queue.push_back(job);
                    self.comp_cv.notify_one();
                }
                None => break,
            }
        }
    }

    fn compaction_loop(self: Arc<Self>) {
        loop {
            let job = {
                let mut st = self.comp.lock();
                loop {
                    if self.shutdown.load(SeqCst) {
                        return;
                    }
                    if let Some(j) = st.queue.pop_front() {
                        st.running += 1;
                        break j;
                    }
                    self.comp_cv.wait(&mut st);
                }
            };
            let failed = self.run_and_release(job);
            if failed {
                std::thread::sleep(Duration::from_millis(100));
            }
            self.schedule_compactions();
        }
    }

    /// Runs a job whose files are already marked busy, then releases them.
    /// Returns true if the job failed.
    fn run_and_release(&self, job: Job) -> bool {
        let res = self.run_compaction(&job);
        if let Err(e) = &res {
            self.counters.compaction_failures.fetch_add(1, Relaxed);
            log::error!("compaction of L{} failed: {e}", job.level);
        }
        let mut st = self.comp.lock();
        for id in job.file_ids() {
            st.busy.remove(&id);
        }
        st.running -= 1;
        self.comp_done_cv.notify_all();
        res.is_err()
    }

    fn run_compaction(&self, job: &Job) -> Result<()> {
        let started = Instant::now();
        let out_level = job.output_level();
        let sources: Vec<Source> = job
            .inputs
            .iter()
            .chain(&job.next)
            .map(|t| Box::new(t.iter()) as Source)
            .collect();
        let mut outputs: Vec<Arc<Table>> = Vec::new();
        let res = (|| -> Result<()> {
            let mut current: Option<(SstBuilder, u64)> = None;
            for rec in MergeIter::new(sources)? {
                let rec = rec?;
                if job.bottommost && rec.is_tombstone() {
                    continue;
                }
                if current.is_none() {
                    let id = self.next_file.fetch_add(1, SeqCst);
                    current = Some((SstBuilder::create(&sst_path(&self.dir, id), SstOptions::from_config(&self.cfg))?, id));
                }
                let (b, _) = current.as_mut().unwrap();
                if let Err(e) = b.add_record(&rec) {
                    let (b, _) = current.take().unwrap();
                    b.abandon();
                    return Err(e);
                }
                if b.estimated_size() >= self.cfg.sst_target_bytes as u64 {
                    let (b, id) = current.take().unwrap();
                    if b.finish()?.is_some() {
                        outputs.push(self.open_table(id)?);
                    }
                }
            }
            if let Some((b, id)) = current.take() {
                if b.finish()?.is_some() {
                    outputs.push(self.open_table(id)?);
                }
            }
            Ok(())
        })();
        if let Err(e) = res {
            for t in &outputs {
                t.mark_obsolete();
            }
            return Err(e);
        }
        let removed: HashSet<u64> = job.file_ids().collect();
        let added: Vec<(usize, Arc<Table>)> = outputs.iter().map(|t| (out_level, t.clone())).collect();
        let mut man = self.manifest.lock();
        let next = self.current().version.apply(&removed, &added);
        if let Err(msg) = next.check_disjoint() {
            for t in &outputs {
                t.mark_obsolete();
            }
            return Err(Error::Background(format!("compaction would break level ordering: {msg}")));
        }
        let mut edits: Vec<Edit> = Vec::new();
        edits.extend(job.inputs.iter().map(|t| Edit::RemoveFile { level: job.level as u8, id: t.id() }));
        edits.extend(job.next.iter().map(|t| Edit::RemoveFile { level: out_level as u8, id: t.id() }));
        edits.extend(outputs.iter().map(|t| Edit::AddFile { level: out_level as u8, id: t.id() }));
        edits.push(Edit::NextFile(self.next_file.load(SeqCst)));
        if let Err(e) = man.append(&edits) {
            for t in &outputs {
                t.mark_obsolete();
            }
            return Err(e);
        }
        {
            let mut sv = self.sv.write();
            let version = Arc::new(sv.version.apply(&removed, &added));
            *sv = Arc::new(SuperVersion {
                active: sv.active.clone(),
                imms: sv.imms.clone(),
                version,
            });
        }
        drop(man);
        for t in job.inputs.iter().chain(&job.next) {
            t.mark_obsolete();
        }
        self.counters.compactions.fetch_add(1, Relaxed);
        self.counters.compaction_ns.fetch_add(nanos(started.elapsed()), Relaxed);
        self.counters.compaction_bytes_in.fetch_add(job.input_bytes(), Relaxed);
        self.counters
            .compaction_bytes_out
            .fetch_add(outputs.iter().map(|t| t.file_size()).sum(), Relaxed);
        Ok(())
    }

    fn scan_impl(&self, lo: u64, hi: u64, limit: usize) -> Result<Vec<(u64, Vec<u8>)>> {
        let mut out = Vec::new();
        if lo > hi || limit == 0 {
            return Ok(out);
        }
        let sv = self.current();
        let mut sources: Vec<Source> = Vec::new();
        for mem in std::iter::once(&sv.active).chain(&sv.imms) {
            sources.push(Box::new(MemSource {
                mem: mem.clone(),
                next: Some(lo),
                hi,
                chunk: limit.clamp(16, SCAN_CHUNK),
                buf: Vec::new().into_iter(),
            }));
        }
        for t in &sv.version.levels[0] {
            if t.min_key() <= hi && t.max_key() >= lo {
                let it = t.iter_from(lo)?;
                sources.push(Box::new(it.take_while(move |r| r.as_ref().map_or(true, |r| r.key.0 <= hi))));
            }
        }
        for files in &sv.version.levels[1..] {
            if !files.is_empty() {
                sources.push(Box::new(LevelIter::new(files, lo, hi)));
            }
        }
        for r in MergeIter::new(sources)? {
            let r = r?;
            if r.key.0 > hi {
                break;
            }
            if r.kind == OpKind::Put {
                out.push((r.key.0, r.value));
                if out.len() >= limit {
                    break;
                }
            }
        }
        Ok(out)
    }
}

impl Engine {
    /// Opens or creates the database in `dir`, recovering from the manifest
    /// and any write-ahead logs.
    pub fn open(dir: impl AsRef<Path>, cfg: EngineConfig) -> Result<Engine> {
        cfg.validate()?;
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let (manifest, state) = Manifest::open(&dir, cfg.max_levels)?;
        let cache = (!cfg.direct_io && cfg.block_cache_bytes > 0).then(|| Arc::new(BlockCache::new(cfg.block_cache_bytes)));

        let live: HashSet<u64> = state.levels.iter().flatten().copied().collect();
        let mut wals = Vec::new();
        let mut max_id = state.next_file;
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = parse_sst_name(&name) {
                max_id = max_id.max(id + 1);
                if !live.contains(&id) {
                    log::info!("removing orphaned {name}");
                    fs::remove_file(dir.join(&name))?;
                }
            } else if let Some(id) = parse_wal_name(&name) {
                max_id = max_id.max(id + 1);
                if id < state.log_number {
                    fs::remove_file(dir.join(&name))?;
                } else {
                    wals.push(id);
                }
            }
        }
        wals.sort_unstable();

        let mut version = Version::new(cfg.max_levels);
        let mut last_seq = state.last_seq;
        for (level, ids) in state.levels.iter().enumerate() {
            for &id in ids {
                let t = Arc::new(Table::open(&sst_path(&dir, id), id, cfg.direct_io, cache.clone())?);
                last_seq = last_seq.max(t.props().max_seq);
                version.levels[level].push(t);
            }
        }
        let version = version.apply(&HashSet::new(), &[]);
        version.check_disjoint().map_err(Error::CorruptManifest)?;

        let policy = SkeletonPolicy::new(cfg.skeleton_mode, cfg.skeleton_phi);
        let placeholder = Arc::new(Memtable::new(0, MemtableIndexKind::SkipListBaseline, 0));
        let inner = Arc::new(Inner {
            dir: dir.clone(),
            write: Mutex::new(WriteState {
                active: placeholder.clone(),
                wal: None,
                last_seq,
            }),
            stall_cv: Condvar::new(),
            sv: RwLock::new(Arc::new(SuperVersion {
                active: placeholder,
                imms: Vec::new(),
                version: Arc::new(version),
            })),
            next_file: AtomicU64::new(max_id),
            manifest: Mutex::new(manifest),
            policy,
            cache,
            flush: Mutex::new(FlushQueue::default()),
            flush_cv: Condvar::new(),
            flush_done_cv: Condvar::new(),
            comp: Mutex::new(CompactionState::default()),
            comp_cv: Condvar::new(),
            comp_done_cv: Condvar::new(),
            counters: Counters::default(),
            reads: ReadCounters::default(),
            bg_error: Mutex::new(None),
            shutdown: AtomicBool::new(false),
            cfg,
        });

        // Replay surviving WAL segments straight into L0 tables.
        let budget = inner.cfg.memtable_budget_bytes;
        let mut replayed = Memtable::new(0, MemtableIndexKind::SkipListBaseline, budget);
        for &id in &wals {
            for r in wal::replay(&wal_path(&dir, id))? {
                last_seq = last_seq.max(r.seq);
                match replayed.insert(r.key, r.seq, r.kind, &r.value) {
                    Ok(_) => {}
                    Err(Error::MemtableFull) => {
                        replayed.freeze();
                        inner.flush_memtable(&Arc::new(replayed), false)?;
                        replayed = Memtable::new(0, MemtableIndexKind::SkipListBaseline, budget);
                        replayed.insert(r.key, r.seq, r.kind, &r.value)?;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if !replayed.is_empty() {
            replayed.freeze();
            inner.flush_memtable(&Arc::new(replayed), false)?;
        }

        let id = inner.next_file.fetch_add(1, SeqCst);
        let active = Arc::new(inner.new_memtable(id));
        let wal = if inner.cfg.wal_enabled {
            Some(WalWriter::create(&wal_path(&dir, id), inner.cfg.sync_wal)?)
        } else {
            None
        };
        inner.manifest.lock().append(&[
            Edit::LogNumber(id),
            Edit::LastSeq(last_seq),
            Edit::NextFile(inner.next_file.load(SeqCst)),
        ])?;
        for &old in &wals {
            fs::remove_file(wal_path(&dir, old))?;
        }
        {
            let mut ws = inner.write.lock();
            ws.active = active.clone();
            ws.wal = wal;
            ws.last_seq = last_seq;
            let mut sv = inner.sv.write();
            *sv = Arc::new(SuperVersion {
                active,
                imms: Vec::new(),
                version: sv.version.clone(),
            });
        }

        let mut threads = Vec::new();
        let i = inner.clone();
        threads.push(
            std::thread::Builder::new()
                .name("flush".into())
                .spawn(move || i.flush_loop())?,
        );
        for n in 0..inner.cfg.compaction_workers {
            let i = inner.clone();
            threads.push(
                std::thread::Builder::new()
                    .name(format!("compaction-{n}"))
                    .spawn(move || i.compaction_loop())?,
            );
        }
        inner.schedule_compactions();
        Ok(Engine { inner, threads })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.inner.dir
    }

    pub fn put(&self, key: u64, value: &[u8]) -> Result<()> {
        self.inner.counters.puts.fetch_add(1, Relaxed);
        self.inner.write(key, OpKind::Put, value)
    }

    pub fn delete(&self, key: u64) -> Result<()> {
        self.inner.counters.deletes.fetch_add(1, Relaxed);
        self.inner.write(key, OpKind::Delete, &[])
    }

    /// Latest value of `key`: active memtable, then immutable memtables
    /// newest first, then L0 newest first, then each deeper level.
    pub fn get(&self, key: u64) -> Result<Option<Vec<u8>>> {
        self.inner.counters.gets.fetch_add(1, Relaxed);
        let sv = self.inner.current();
        let live = |r: InternalRecord| (r.kind == OpKind::Put).then_some(r.value);
        for mem in std::iter::once(&sv.active).chain(&sv.imms) {
            if let Some(r) = mem.get(UserKey(key)) {
                return Ok(live(r));
            }
        }
        Ok(sv.version.get(key, &self.inner.reads)?.and_then(live))
    }

    /// Live pairs with keys in `[lo, hi]`, ascending.
    pub fn scan(&self, lo: u64, hi: u64) -> Result<Vec<(u64, Vec<u8>)>> {
        self.inner.counters.scans.fetch_add(1, Relaxed);
        self.inner.scan_impl(lo, hi, usize::MAX)
    }

    /// The first `limit` live pairs with keys >= `lo`.
    pub fn scan_from(&self, lo: u64, limit: usize) -> Result<Vec<(u64, Vec<u8>)>> {
        self.inner.counters.scans.fetch_add(1, Relaxed);
        self.inner.scan_impl(lo, u64::MAX, limit)
    }

    /// Rotates the active memtable (if it holds anything) and waits until
    /// every immutable memtable is on disk.
    pub fn flush(&self) -> Result<()> {
        {
            let mut ws = self.inner.write.lock();
            if !ws.active.is_empty() {
                self.inner.rotate(&mut ws)?;
            }
        }
        let mut q = self.inner.flush.lock();
        while !q.jobs.is_empty() || q.busy {
            self.inner.check_bg()?;
            self.inner.flush_done_cv.wait_for(&mut q, Duration::from_millis(20));
        }
        drop(q);
        self.inner.check_bg()
    }

    /// Merges every file of `level` into `level + 1`, waiting for any
    /// background job that holds the same files.
    pub fn compact_level(&self, level: usize) -> Result<()> {
        let inner = &self.inner;
        if level + 1 >= inner.cfg.max_levels {
            return Ok(());
        }
        let job = {
            let mut st = inner.comp.lock();
            loop {
                inner.check_bg()?;
                let v = inner.current().version.clone();
                if v.files(level).is_empty() {
                    return Ok(());
                }
                if let Some(job) = compaction::whole_level_job(&v, level, &st.busy) {
                    let ids: Vec<u64> = job.file_ids().collect();
                    st.busy.extend(ids);
                    st.running += 1;
                    break job;
                }
                inner.comp_done_cv.wait_for(&mut st, Duration::from_millis(20));
            }
        };
        let level_of_job = job.level;
        if inner.run_and_release(job) {
            return Err(Error::Background(format!("manual compaction of L{level_of_job} failed")));
        }
        inner.schedule_compactions();
        Ok(())
    }

    /// Flushes, then pushes data down level by level so that L0 is empty.
    pub fn compact_all(&self) -> Result<()> {
        self.flush()?;
        for level in 0..self.inner.cfg.max_levels - 1 {
            let has_deeper = {
                let v = self.inner.current().version.clone();
                (level + 1..v.levels.len()).any(|l| !v.files(l).is_empty())
            };
            if level > 0 && !has_deeper {
                break;
            }
            self.compact_level(level)?;
        }
        Ok(())
    }

    /// Waits until no flush or compaction is queued or running and no
    /// compaction is due.
    pub fn wait_for_background(&self) -> Result<()> {
        loop {
            {
                let mut q = self.inner.flush.lock();
                while !q.jobs.is_empty() || q.busy {
                    self.inner.check_bg()?;
                    self.inner.flush_done_cv.wait_for(&mut q, Duration::from_millis(20));
                }
            }
            self.inner.schedule_compactions();
            let mut st = self.inner.comp.lock();
            if st.queue.is_empty() && st.running == 0 {
                let q = self.inner.flush.lock();
                if q.jobs.is_empty() && !q.busy {
                    return self.inner.check_bg();
                }
                continue;
            }
            self.inner.comp_done_cv.wait_for(&mut st, Duration::from_millis(20));
        }
    }

    pub fn super_version(&self) -> Arc<SuperVersion> {
        self.inner.current()
    }

    pub fn skeleton_policy(&self) -> &SkeletonPolicy {
        &self.inner.policy
    }

    /// Memtable rotations so far; cheaper than a full `stats()` snapshot.
    pub fn rotations(&self) -> u64 {
        self.inner.counters.rotations.load(Relaxed)
    }

    /// Highest sequence number assigned so far.
    pub fn last_seq(&self) -> u64 {
        self.inner.write.lock().last_seq
    }

    pub fn stats(&self) -> EngineStats {
        let c = &self.inner.counters;
        let r = &self.inner.reads;
        let l = |a: &AtomicU64| a.load(Relaxed);
        let v = self.inner.current().version.clone();
        EngineStats {
            puts: l(&c.puts),
            deletes: l(&c.deletes),
            gets: l(&c.gets),
            scans: l(&c.scans),
            rotations: l(&c.rotations),
            warm_memtables: l(&c.warm_memtables),
            stalls: l(&c.stalls),
            stall_ns: l(&c.stall_ns),
            flushes: l(&c.flushes),
            flush_ns: l(&c.flush_ns),
            flush_bytes: l(&c.flush_bytes),
            index_train_ns: l(&c.index_train_ns),
            skeleton_refreshes: l(&c.skeleton_refreshes),
            skeleton_ns: l(&c.skeleton_ns),
            skeleton_copy_ns: l(&c.skeleton_copy_ns),
            memtable_shifts: l(&c.memtable_shifts),
            memtable_resizes: l(&c.memtable_resizes),
            memtable_splits: l(&c.memtable_splits),
            compactions: l(&c.compactions),
            compaction_ns: l(&c.compaction_ns),
            compaction_bytes_in: l(&c.compaction_bytes_in),
            compaction_bytes_out: l(&c.compaction_bytes_out),
            compaction_failures: l(&c.compaction_failures),
            table_probes: l(&r.table_probes),
            bloom_negatives: l(&r.bloom_negatives),
            data_reads: l(&r.data_reads),
            data_read_bytes: l(&r.data_read_bytes),
            middle_hits: l(&r.middle_hits),
            left_hits: l(&r.left_hits),
            right_hits: l(&r.right_hits),
            cache_hits: self.inner.cache.as_ref().map_or(0, |c| c.hits()),
            cache_misses: self.inner.cache.as_ref().map_or(0, |c| c.misses()),
            levels: (0..v.levels.len()).map(|i| (v.files(i).len(), v.level_bytes(i))).collect(),
            index_bytes: v.all_tables().map(|t| t.index_bytes()).sum(),
            sst_bytes: v.all_tables().map(|t| t.file_size()).sum(),
        }
    }

    /// Flushes all memtables and stops the background threads.
    pub fn close(mut self) -> Result<()> {
        let res = self.flush().and_then(|_| self.wait_for_background());
        self.stop();
        res
    }

    fn stop(&mut self) {
        self.inner.shutdown.store(true, SeqCst);
        {
            let _q = self.inner.flush.lock();
            self.inner.flush_cv.notify_all();
        }
        {
            let _c = self.inner.comp.lock();
            self.inner.comp_cv.notify_all();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Engine {
    /// Stops background work without flushing; unflushed writes survive in
    /// the WAL (if enabled).
    fn drop(&mut self) {
        self.stop();
    }
}
