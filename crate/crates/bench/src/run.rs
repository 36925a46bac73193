//! The benchmark driver: preload, concurrent clients, and report assembly.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::time::Instant;

use hdrhistogram::Histogram;
use learnkv::{Engine, EngineConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::keys::{gen_keys, shuffled};
use crate::report::{IntervalPoint, LatencySummary, RunReport, SstIndexSize};
use crate::workload::{scramble, Access, OpKind, RankSampler, ValueSize, WorkloadSpec};

/// Deterministic value for `(key, version)`: the key and version in the
/// first 16 bytes, pseudo-random filler after.
pub fn make_value(key: u64, version: u64, seed: u64, size: &ValueSize, out: &mut Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(key ^ version.rotate_left(32) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let len = size.sample(&mut rng);
    out.clear();
    out.extend_from_slice(&key.to_le_bytes());
    out.extend_from_slice(&version.to_le_bytes());
    if len > out.len() {
        let start = out.len();
        out.resize(len, 0);
        rng.fill_bytes(&mut out[start..]);
    }
    out.truncate(len);
}

/// The write order of every key the run may touch: the preloaded prefix
/// followed by keys reserved for inserts.
pub struct KeyPlan {
    pub order: Vec<u64>,
    pub preload: usize,
}

pub fn plan_keys(spec: &WorkloadSpec) -> Result<KeyPlan> {
    if !spec.phases.is_empty() {
        let mut order = Vec::with_capacity(spec.op_count as usize);
        let mut p = 0u64;
        while (order.len() as u64) < spec.op_count {
            let d = &spec.phases[(p as usize) % spec.phases.len()];
            let n = spec.phase_ops.min(spec.op_count - order.len() as u64) as usize;
            let keys = gen_keys(d, n, spec.seed.wrapping_add(p))?;
            // A small per-phase shift keeps repeated distributions from
            // producing identical key sets.
            order.extend(shuffled(keys, spec.seed ^ p).into_iter().map(|k| k + p));
            p += 1;
        }
        return Ok(KeyPlan { order, preload: 0 });
    }
    let preload = if spec.mix.needs_preload() && spec.op_count > 0 {
        spec.key_count as usize
    } else {
        0
    };
    let reserve = if spec.mix.insert > 0.0 {
        (spec.op_count as f64 * spec.mix.insert).ceil() as usize + spec.threads
    } else {
        0
    };
    let keys = gen_keys(&spec.dist, preload + reserve, spec.seed)?;
    Ok(KeyPlan {
        order: shuffled(keys, spec.seed),
        preload,
    })
}

/// Progress mark of one client: `ops` completed since its previous mark.
#[derive(Clone, Copy, Debug)]
pub struct Checkpoint {
    pub t_ns: u64,
    pub ops: u64,
    pub rotations: u64,
}

/// Splits the merged client progress into intervals of `interval` ops.
/// Interval boundaries are interpolated between marks; the last interval
/// ends at `end_ns` and may be short.
pub fn intervals(marks: &mut [Checkpoint], done: u64, interval: u64, end_ns: u64, rot_base: u64) -> Vec<IntervalPoint> {
    marks.sort_by_key(|c| c.t_ns);
    let n = done.div_ceil(interval);
    let mut bounds: Vec<(f64, u64)> = Vec::with_capacity(n as usize + 1);
    bounds.push((0.0, rot_base));
    let (mut cum, mut prev_t, mut rot) = (0u64, 0u64, rot_base);
    let mut next = interval;
    for c in marks.iter() {
        rot = rot.max(c.rotations);
        let after = cum + c.ops;
        while next <= after && next < done {
            let frac = (next - cum) as f64 / c.ops as f64;
            bounds.push((prev_t as f64 + frac * (c.t_ns - prev_t) as f64, rot));
            next += interval;
        }
        cum = after;
        prev_t = c.t_ns;
    }
    if n > 0 {
        bounds.push((end_ns as f64, rot));
    }
    (0..n)
        .map(|i| {
            let (t0, r0) = bounds[i as usize];
            let (t1, r1) = bounds[i as usize + 1];
            let ops = interval.min(done - i * interval);
            let seconds = (t1 - t0) / 1e9;
            IntervalPoint {
                index: i,
                end_op: i * interval + ops,
                ops,
                seconds,
                ops_per_sec: if seconds > 0.0 { ops as f64 / seconds } else { 0.0 },
                rotations: r1 - r0,
            }
        })
        .collect()
}

fn new_histogram() -> Histogram<u64> {
    Histogram::new_with_bounds(1, 3_600_000_000_000, 3).expect("valid histogram bounds")
}

struct ClientResult {
    hists: Vec<Histogram<u64>>,
    marks: Vec<Checkpoint>,
    done: u64,
    read_hits: u64,
    read_misses: u64,
    error: Option<String>,
}

struct Shared<'a> {
    spec: &'a WorkloadSpec,
    db: &'a Engine,
    order: &'a [u64],
    preload: usize,
    cursor: AtomicU64,
    start: Instant,
    mark_every: u64,
}

fn client(sh: &Shared<'_>, t: usize, ops: u64) -> ClientResult {
    let spec = sh.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1 + t as u64));
    let sampler = RankSampler::new(spec.access, sh.preload as u64);
    let insert_only = spec.mix.insert == 1.0;
    let mut res = ClientResult {
        hists: OpKind::ALL.iter().map(|_| new_histogram()).collect(),
        marks: Vec::with_capacity((ops / sh.mark_every) as usize + 2),
        done: 0,
        read_hits: 0,
        read_misses: 0,
        error: None,
    };
    let mut value = Vec::with_capacity(256);
    let mut since_mark = 0u64;
    let existing = |rng: &mut ChaCha8Rng| -> u64 {
        let rank = sampler.rank(rng);
        match spec.access {
            Access::Uniform => sh.order[rank as usize],
            Access::Zipfian { .. } => sh.order[scramble(rank, sh.preload as u64) as usize],
            Access::Latest { .. } => {
                let live = (sh.cursor.load(Relaxed) as usize).min(sh.order.len()).max(1);
                sh.order[live - 1 - (rank as usize).min(live - 1)]
            }
        }
    };
    for i in 0..ops {
        let kind = if insert_only { OpKind::Insert } else { spec.mix.choose(&mut rng) };
        let version = ((t as u64 + 1) << 40) | (i + 1);
        let timed = i % u64::from(spec.latency_sample) == 0;
        let began = timed.then(Instant::now);
        let outcome: learnkv::Result<()> = match kind {
            OpKind::Read => {
                let k = existing(&mut rng);
                sh.db.get(k).map(|v| {
                    if v.is_some() {
                        res.read_hits += 1;
                    } else {
                        res.read_misses += 1;
                    }
                })
            }
            OpKind::Update => {
                let k = existing(&mut rng);
                make_value(k, version, spec.seed, &spec.value_size, &mut value);
                sh.db.put(k, &value)
            }
            OpKind::Insert => {
                let idx = sh.cursor.fetch_add(1, Relaxed) as usize;
                let k = match sh.order.get(idx) {
                    Some(&k) => k,
                    None => existing(&mut rng),
                };
                make_value(k, version, spec.seed, &spec.value_size, &mut value);
                sh.db.put(k, &value)
            }
            OpKind::Scan => {
                let k = existing(&mut rng);
                sh.db.scan_from(k, spec.scan_length).map(|_| ())
            }
            OpKind::Rmw => {
                let k = existing(&mut rng);
                sh.db.get(k).and_then(|_| {
                    make_value(k, version, spec.seed, &spec.value_size, &mut value);
                    sh.db.put(k, &value)
                })
            }
        };
        if let Err(e) = outcome {
            res.error = Some(e.to_string());
            break;
        }
        if let Some(b) = began {
            res.hists[kind as usize].saturating_record(b.elapsed().as_nanos().max(1) as u64);
        }
        res.done += 1;
        since_mark += 1;
        if since_mark == sh.mark_every {
            res.marks.push(Checkpoint {
                t_ns: sh.start.elapsed().as_nanos() as u64,
                ops: since_mark,
                rotations: sh.db.rotations(),
            });
            since_mark = 0;
        }
    }
    if since_mark > 0 {
        res.marks.push(Checkpoint {
            t_ns: sh.start.elapsed().as_nanos() as u64,
            ops: since_mark,
            rotations: sh.db.rotations(),
        });
    }
    res
}

fn preload(spec: &WorkloadSpec, db: &Engine, keys: &[u64]) -> learnkv::Result<()> {
    let chunk = keys.len().div_ceil(spec.threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = keys
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || -> learnkv::Result<()> {
                    let mut value = Vec::with_capacity(256);
                    for &k in part {
                        make_value(k, 0, spec.seed, &spec.value_size, &mut value);
                        db.put(k, &value)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("preload thread panicked"))
    })?;
    db.flush()?;
    db.wait_for_background()
}

pub fn describe_config(spec: &WorkloadSpec, cfg: &EngineConfig) -> std::collections::BTreeMap<String, String> {
    let mut m = std::collections::BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("memtable_index", format!("{:?}", cfg.memtable_index));
    put("sst_index", format!("{:?}", cfg.sst_index));
    put("skeleton_mode", format!("{:?}", cfg.skeleton_mode));
    put("skeleton_phi", cfg.skeleton_phi.to_string());
    put("memtable_budget_bytes", cfg.memtable_budget_bytes.to_string());
    put("block_cache_bytes", cfg.block_cache_bytes.to_string());
    put("direct_io", cfg.direct_io.to_string());
    put("wal_enabled", cfg.wal_enabled.to_string());
    put("epsilon_fence", cfg.epsilon_fence.to_string());
    put("dist", format!("{:?}", spec.dist.kind));
    put("access", format!("{:?}", spec.access));
    put("value_size", format!("{:?}", spec.value_size));
    put("key_count", spec.key_count.to_string());
    put("seed", spec.seed.to_string());
    m
}

/// Runs `spec` against a fresh engine in `dir`.
pub fn run(spec: &WorkloadSpec, cfg: &EngineConfig, dir: &Path) -> Result<RunReport> {
    spec.validate()?;
    let plan = plan_keys(spec)?;
    let db = Engine::open(dir, cfg.clone())?;
    let report = run_on(spec, &db, &plan)?;
    db.close()?;
    Ok(report)
}

/// Runs `spec` against an open engine, preloading `plan.order[..plan.preload]`
/// first.
pub fn run_on(spec: &WorkloadSpec, db: &Engine, plan: &KeyPlan) -> Result<RunReport> {
    spec.validate()?;
    let mut report = RunReport {
        workload: spec.name.clone(),
        valid: true,
        config: describe_config(spec, db.config()),
        threads: spec.threads,
        op_count: spec.op_count,
        interval_ops: spec.interval_ops,
        ..RunReport::default()
    };
    let load_start = Instant::now();
    if plan.preload > 0 {
        if let Err(e) = preload(spec, db, &plan.order[..plan.preload]) {
            report.valid = false;
            report.error = Some(format!("preload: {e}"));
            return Ok(report);
        }
        report.load_ops = plan.preload as u64;
    }
    report.load_seconds = load_start.elapsed().as_secs_f64();

    let before = db.stats();
    let rot_base = db.rotations();
    let mark_every = (spec.interval_ops / (spec.threads as u64 * 32)).clamp(1, 4096);
    let shared = Shared {
        spec,
        db,
        order: &plan.order,
        preload: plan.preload,
        cursor: AtomicU64::new(plan.preload as u64),
        start: Instant::now(),
        mark_every,
    };
    let per = spec.op_count / spec.threads as u64;
    let extra = spec.op_count % spec.threads as u64;
    let results: Vec<ClientResult> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..spec.threads)
            .map(|t| {
                let ops = per + u64::from((t as u64) < extra);
                let sh = &shared;
                s.spawn(move || client(sh, t, ops))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
    });
    let end_ns = shared.start.elapsed().as_nanos() as u64;

    let mut hists: Vec<Histogram<u64>> = OpKind::ALL.iter().map(|_| new_histogram()).collect();
    let mut marks = Vec::new();
    for r in &results {
        report.ops_done += r.done;
        report.read_hits += r.read_hits;
        report.read_misses += r.read_misses;
        for (h, rh) in hists.iter_mut().zip(&r.hists) {
            h.add(rh).expect("histograms share bounds");
        }
        marks.extend_from_slice(&r.marks);
        if let Some(e) = &r.error {
            report.valid = false;
            report.error.get_or_insert_with(|| e.clone());
        }
    }
    report.elapsed_seconds = end_ns as f64 / 1e9;
    report.ops_per_sec = if end_ns > 0 {
        report.ops_done as f64 / report.elapsed_seconds
    } else {
        0.0
    };
    report.intervals = intervals(&mut marks, report.ops_done, spec.interval_ops, end_ns, rot_base);
    let us = |ns: u64| ns as f64 / 1e3;
    report.latencies = OpKind::ALL
        .iter()
        .zip(&hists)
        .filter(|(_, h)| h.len() > 0)
        .map(|(k, h)| LatencySummary {
            op: k.name().to_string(),
            count: h.len(),
            mean_us: h.mean() / 1e3,
            p50_us: us(h.value_at_quantile(0.50)),
            p90_us: us(h.value_at_quantile(0.90)),
            p99_us: us(h.value_at_quantile(0.99)),
            max_us: us(h.max()),
        })
        .collect();

    let st = db.stats();
    let d = |a: u64, b: u64| a - b;
    report.rotations = d(st.rotations, before.rotations);
    report.warm_memtables = d(st.warm_memtables, before.warm_memtables);
    report.stalls = d(st.stalls, before.stalls);
    report.stall_seconds = d(st.stall_ns, before.stall_ns) as f64 / 1e9;
    report.flushes = d(st.flushes, before.flushes);
    report.flush_seconds = d(st.flush_ns, before.flush_ns) as f64 / 1e9;
    report.mean_flush_ms = if report.flushes > 0 {
        report.flush_seconds * 1e3 / report.flushes as f64
    } else {
        0.0
    };
    report.skeleton_refreshes = d(st.skeleton_refreshes, before.skeleton_refreshes);
    report.skeleton_seconds = d(st.skeleton_ns, before.skeleton_ns) as f64 / 1e9;
    report.skeleton_copy_seconds = d(st.skeleton_copy_ns, before.skeleton_copy_ns) as f64 / 1e9;
    report.skeleton_overhead_pct = if report.flush_seconds > 0.0 {
        100.0 * (report.skeleton_seconds + report.skeleton_copy_seconds) / report.flush_seconds
    } else {
        0.0
    };
    report.compactions = d(st.compactions, before.compactions);
    report.compaction_seconds = d(st.compaction_ns, before.compaction_ns) as f64 / 1e9;
    report.memtable_shifts = d(st.memtable_shifts, before.memtable_shifts);
    report.memtable_resizes = d(st.memtable_resizes, before.memtable_resizes);
    report.memtable_splits = d(st.memtable_splits, before.memtable_splits);
    report.table_probes = d(st.table_probes, before.table_probes);
    report.bloom_negatives = d(st.bloom_negatives, before.bloom_negatives);
    report.data_reads = d(st.data_reads, before.data_reads);
    report.data_read_bytes = d(st.data_read_bytes, before.data_read_bytes);
    report.middle_hits = d(st.middle_hits, before.middle_hits);
    report.left_hits = d(st.left_hits, before.left_hits);
    report.right_hits = d(st.right_hits, before.right_hits);
    report.cache_hits = d(st.cache_hits, before.cache_hits);
    report.cache_misses = d(st.cache_misses, before.cache_misses);
    let sv = db.super_version();
    for (level, files) in sv.version.levels.iter().enumerate() {
        for t in files {
            report.sst_indexes.push(SstIndexSize {
                id: t.id(),
                level,
                file_bytes: t.file_size(),
                index_bytes: t.index_bytes(),
                blocks: t.props().block_count,
            });
        }
    }
    Ok(report)
}
