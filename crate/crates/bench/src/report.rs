//! Run results and their JSON and CSV renderings.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalPoint {
    pub index: u64,
    /// Operations completed at the end of the interval.
    pub end_op: u64,
    pub ops: u64,
    pub seconds: f64,
    pub ops_per_sec: f64,
    /// Memtable rotations completed during the interval.
    pub rotations: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub op: String,
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SstIndexSize {
    pub id: u64,
    pub level: usize,
    pub file_bytes: u64,
    pub index_bytes: u64,
    pub blocks: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub workload: String,
    /// False if an engine error cut the run short.
    pub valid: bool,
    pub error: Option<String>,
    pub config: BTreeMap<String, String>,
    pub threads: usize,
    pub op_count: u64,
    pub ops_done: u64,
    pub load_ops: u64,
    pub load_seconds: f64,
    pub elapsed_seconds: f64,
    pub ops_per_sec: f64,
    pub interval_ops: u64,
    pub intervals: Vec<IntervalPoint>,
    pub latencies: Vec<LatencySummary>,
    pub read_hits: u64,
    pub read_misses: u64,
    pub rotations: u64,
    pub warm_memtables: u64,
    pub stalls: u64,
    pub stall_seconds: f64,
    pub flushes: u64,
    pub flush_seconds: f64,
    pub mean_flush_ms: f64,
    pub skeleton_refreshes: u64,
    /// Time spent rebuilding skeletons.
    pub skeleton_seconds: f64,
    /// Time spent copying skeletons into fresh memtables.
    pub skeleton_copy_seconds: f64,
    /// Skeleton rebuild and copy time as a share of flush time.
    pub skeleton_overhead_pct: f64,
    pub compactions: u64,
    pub compaction_seconds: f64,
    pub memtable_shifts: u64,
    pub memtable_resizes: u64,
    pub memtable_splits: u64,
    pub table_probes: u64,
    pub bloom_negatives: u64,
    pub data_reads: u64,
    pub data_read_bytes: u64,
    pub middle_hits: u64,
    pub left_hits: u64,
    pub right_hits: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub sst_indexes: Vec<SstIndexSize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

pub const CSV_HEADER: [&str; 15] = [
    "record",
    "name",
    "index",
    "end_op",
    "ops",
    "seconds",
    "ops_per_sec",
    "rotations",
    "count",
    "mean_us",
    "p50_us",
    "p90_us",
    "p99_us",
    "max_us",
    "value",
];

/// One CSV line; unused columns stay empty.
#[derive(Default, Serialize)]
struct Row<'a> {
    record: &'a str,
    name: &'a str,
    index: Option<u64>,
    end_op: Option<u64>,
    ops: Option<u64>,
    seconds: Option<f64>,
    ops_per_sec: Option<f64>,
    rotations: Option<u64>,
    count: Option<u64>,
    mean_us: Option<f64>,
    p50_us: Option<f64>,
    p90_us: Option<f64>,
    p99_us: Option<f64>,
    max_us: Option<f64>,
    value: Option<String>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(s)?)
    }

    /// Long-format CSV: summary fields, then the interval series, then
    /// latency percentiles, all under one fixed header.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        let summary = serde_json::to_value(self)?;
        if let serde_json::Value::Object(fields) = summary {
            for (name, v) in &fields {
                if v.is_array() || v.is_object() {
                    continue;
                }
                let value = match v {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Null => String::new(),
                    other => other.to_string(),
                };
                w.serialize(Row {
                    record: "summary",
                    name,
                    value: Some(value),
                    ..Row::default()
                })?;
            }
        }
        for (k, v) in &self.config {
            w.serialize(Row {
                record: "config",
                name: k,
                value: Some(v.clone()),
                ..Row::default()
            })?;
        }
        for p in &self.intervals {
            w.serialize(Row {
                record: "interval",
                name: "throughput",
                index: Some(p.index),
                end_op: Some(p.end_op),
                ops: Some(p.ops),
                seconds: Some(p.seconds),
                ops_per_sec: Some(p.ops_per_sec),
                rotations: Some(p.rotations),
                ..Row::default()
            })?;
        }
        for l in &self.latencies {
            w.serialize(Row {
                record: "latency",
                name: &l.op,
                count: Some(l.count),
                mean_us: Some(l.mean_us),
                p50_us: Some(l.p50_us),
                p90_us: Some(l.p90_us),
                p99_us: Some(l.p99_us),
                max_us: Some(l.max_us),
                ..Row::default()
            })?;
        }
        for s in &self.sst_indexes {
            w.serialize(Row {
                record: "sst",
                name: "index_bytes",
                index: Some(s.id),
                count: Some(s.blocks),
                value: Some(format!("level={} file_bytes={} index_bytes={}", s.level, s.file_bytes, s.index_bytes)),
                ..Row::default()
            })?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn emit(&self, format: Format, out: Option<&Path>) -> Result<()> {
        let text = match format {
            Format::Json => self.to_json()?,
            Format::Csv => self.to_csv()?,
        };
        match out {
            Some(p) => std::fs::write(p, text)?,
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(text.as_bytes())?;
                stdout.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}
