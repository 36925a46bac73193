use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use learnkv::config::MIB;
use learnkv::{EngineConfig, MemtableIndexKind, SkeletonMode, SstIndexKind};
use learnkv_bench::keys::{DistKind, KeyDistribution};
use learnkv_bench::report::Format;
use learnkv_bench::workload::{Access, ValueSize, WorkloadSpec};
use learnkv_bench::{run, BenchError};

#[derive(Clone, Copy, Debug)]
struct Skeleton(SkeletonMode, u32);

fn parse_skeleton(s: &str) -> Result<Skeleton, String> {
    match s {
        "off" => Ok(Skeleton(SkeletonMode::Off, 10)),
        "single" => Ok(Skeleton(SkeletonMode::Single, 10)),
        _ => {
            let k = s
                .strip_prefix("phi=")
                .and_then(|k| k.parse::<u32>().ok())
                .filter(|&k| k >= 1)
                .ok_or_else(|| format!("expected off, single or phi=K, got {s:?}"))?;
            Ok(Skeleton(SkeletonMode::Periodic, k))
        }
    }
}

fn parse_memtable(s: &str) -> Result<MemtableIndexKind, String> {
    match s {
        "learned" => Ok(MemtableIndexKind::Learned),
        "skiplist" => Ok(MemtableIndexKind::SkipListBaseline),
        _ => Err(format!("expected learned or skiplist, got {s:?}")),
    }
}

fn parse_sst(s: &str) -> Result<SstIndexKind, String> {
    match s {
        "pgm-fence" => Ok(SstIndexKind::PgmFence),
        "fence-table" => Ok(SstIndexKind::FenceTableBaseline),
        _ => Err(format!("expected pgm-fence or fence-table, got {s:?}")),
    }
}

fn parse_value_mix(s: &str) -> Result<ValueSize, String> {
    ValueSize::mix(s).ok_or_else(|| format!("expected udb, zippydb or up2x, got {s:?}"))
}

/// Benchmark driver for the learnkv engine.
#[derive(Parser, Debug)]
#[command(name = "bench", version)]
struct Args {
    /// fillrandom, readrandom, balanced or ycsb-a..ycsb-f.
    #[arg(long, default_value = "fillrandom")]
    workload: String,
    /// Key distribution: uniform, linear, lognormal or clustered.
    #[arg(long, default_value = "uniform")]
    dist: DistKind,
    /// Access pattern for reads and updates: uniform, zipfian or latest.
    /// Defaults to the workload's own.
    #[arg(long)]
    access: Option<Access>,
    /// Keys preloaded before a workload that reads.
    #[arg(long, default_value_t = 1_000_000)]
    keys: u64,
    /// Measured operations.
    #[arg(long, default_value_t = 1_000_000)]
    ops: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 100, conflicts_with = "value_mix")]
    value_size: usize,
    /// Value-size mixture: udb, zippydb or up2x.
    #[arg(long, value_parser = parse_value_mix)]
    value_mix: Option<ValueSize>,
    /// Keys read by each scan.
    #[arg(long, default_value_t = 100)]
    scan_length: usize,
    /// Cycle the key distribution every N inserts (fillrandom only).
    #[arg(long, requires = "phases")]
    phase_ops: Option<u64>,
    /// Comma-separated distributions to cycle through, e.g. linear,clustered.
    #[arg(long, value_delimiter = ',')]
    phases: Vec<DistKind>,
    /// Operations per throughput interval.
    #[arg(long, default_value_t = 100_000)]
    interval: u64,
    /// Record latency for one in N operations.
    #[arg(long, default_value_t = 1)]
    latency_sample: u32,
    #[arg(long, default_value = "learned", value_parser = parse_memtable)]
    memtable_index: MemtableIndexKind,
    #[arg(long, default_value = "pgm-fence", value_parser = parse_sst)]
    sst_index: SstIndexKind,
    /// off, single or phi=K.
    #[arg(long, default_value = "phi=10", value_parser = parse_skeleton)]
    skeleton: Skeleton,
    #[arg(long, default_value_t = 64)]
    memtable_mb: usize,
    #[arg(long, default_value_t = 32)]
    block_cache_mb: usize,
    /// Error bound of the SST fence model.
    #[arg(long, default_value_t = 1)]
    epsilon: u32,
    #[arg(long, default_value_t = 8)]
    compaction_workers: usize,
    /// Bypass the page cache for SST reads.
    #[arg(long)]
    direct_io: bool,
    /// Keep a write-ahead log (off for pure throughput runs).
    #[arg(long)]
    wal: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "json")]
    report: Format,
    /// Report destination; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Database directory; a temporary one is used and removed if omitted.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Print the layout of an SST file and exit.
    #[arg(long)]
    dump_sst: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match real_main(args) {
        Ok(valid) => {
            if valid {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(args: Args) -> Result<bool, BenchError> {
    if let Some(path) = &args.dump_sst {
        print!("{}", learnkv::sst::dump(path)?);
        return Ok(true);
    }
    let mut spec = WorkloadSpec::preset(&args.workload)?;
    spec.op_count = args.ops;
    spec.key_count = args.keys;
    spec.threads = args.threads;
    spec.dist = KeyDistribution::new(args.dist);
    if let Some(a) = args.access {
        spec.access = a;
    }
    spec.value_size = args.value_mix.unwrap_or(ValueSize::Fixed(args.value_size));
    spec.scan_length = args.scan_length;
    spec.seed = args.seed;
    spec.interval_ops = args.interval;
    spec.latency_sample = args.latency_sample;
    spec.phases = args.phases.iter().map(|&k| KeyDistribution::new(k)).collect();
    spec.phase_ops = args.phase_ops.unwrap_or(0);

    let cfg = EngineConfig {
        memtable_budget_bytes: args.memtable_mb * MIB,
        block_cache_bytes: args.block_cache_mb * MIB,
        memtable_index: args.memtable_index,
        sst_index: args.sst_index,
        skeleton_mode: args.skeleton.0,
        skeleton_phi: args.skeleton.1,
        epsilon_fence: args.epsilon,
        compaction_workers: args.compaction_workers,
        direct_io: args.direct_io,
        wal_enabled: args.wal,
        ..EngineConfig::default()
    };
    let tmp;
    let dir = match &args.db {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::Builder::new().prefix("learnkv-bench").tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let report = run(&spec, &cfg, &dir)?;
    eprintln!(
        "{}: {} ops in {:.2}s = {:.0} ops/s{}",
        report.workload,
        report.ops_done,
        report.elapsed_seconds,
        report.ops_per_sec,
        report.error.as_deref().map(|e| format!(" (aborted: {e})")).unwrap_or_default()
    );
    report.emit(args.report, args.out.as_deref())?;
    Ok(report.valid)
}
