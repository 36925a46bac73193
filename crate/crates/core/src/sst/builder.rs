use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::config::{EngineConfig, SstIndexKind};
use crate::error::{Error, Result};
use crate::types::{encode_parts, InternalRecord, OpKind, RecordRef};

use super::block::BlockBuilder;
use super::bloom::Bloom;
use super::fence::{BlockHandle, BlockIndex};
use super::format::{Footer, Properties, Region, FOOTER_LEN};

#[derive(Clone, Copy, Debug)]
pub struct SstOptions {
    pub block_target_bytes: usize,
    pub bloom_bits_per_key: u32,
    pub epsilon: u32,
    pub index_kind: SstIndexKind,
}

impl Default for SstOptions {
    fn default() -> Self {
        SstOptions::from_config(&EngineConfig::default())
    }
}

impl SstOptions {
    pub fn from_config(c: &EngineConfig) -> Self {
        SstOptions {
            block_target_bytes: c.block_target_bytes,
            bloom_bits_per_key: c.bloom_bits_per_key,
            epsilon: c.epsilon_fence,
            index_kind: c.sst_index,
        }
    }
}

/// Summary of a finished file.
#[derive(Clone, Debug)]
pub struct SstInfo {
    pub path: PathBuf,
    pub file_size: u64,
    pub props: Properties,
    pub bloom_bytes: u64,
    /// Index region plus block-offsets region.
    pub index_bytes: u64,
    pub index_train_time: Duration,
}

/// Streams records into blocks and appends the metadata on `finish`.
pub struct SstBuilder {
    path: PathBuf,
    out: BufWriter<File>,
    opts: SstOptions,
    block: BlockBuilder,
    scratch: Vec<u8>,
    encoded: Vec<u8>,
    offset: u64,
    fence_keys: Vec<u64>,
    handles: Vec<BlockHandle>,
    keys: Vec<u64>,
    last_key: Option<u64>,
    max_seq: u64,
    max_block_len: u32,
    tombstones: u32,
}

impl SstBuilder {
    pub fn create(path: &Path, opts: SstOptions) -> Result<Self> {
        let file = File::create(path)?;
        Ok(SstBuilder {
            path: path.to_path_buf(),
            out: BufWriter::with_capacity(1 << 20, file),
            opts,
            block: BlockBuilder::new(),
            scratch: Vec::new(),
            encoded: Vec::new(),
            offset: 0,
            fence_keys: Vec::new(),
            handles: Vec::new(),
            keys: Vec::new(),
            last_key: None,
            max_seq: 0,
            max_block_len: 0,
            tombstones: 0,
        })
    }

    pub fn record_count(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Data bytes written so far, including the open block.
    pub fn estimated_size(&self) -> u64 {
        self.offset + self.block.encoded_size() as u64
    }

    /// Keys must be strictly increasing: one version per key.
    pub fn add(&mut self, r: RecordRef<'_>) -> Result<()> {
        let key = r.key.0;
        if self.last_key.is_some_and(|last| key <= last) {
            return Err(Error::NotSorted(self.keys.len()));
        }
        self.scratch.clear();
        encode_parts(r.key, r.seq, r.kind, r.value, &mut self.scratch)?;
        if !self.block.is_empty() && self.block.size_with(self.scratch.len()) > self.opts.block_target_bytes {
            self.flush_block()?;
        }
        self.block.push_encoded(key, &self.scratch);
        self.last_key = Some(key);
        self.keys.push(key);
        self.max_seq = self.max_seq.max(r.seq);
        if r.kind == OpKind::Delete {
            self.tombstones += 1;
        }
        Ok(())
    }

    pub fn add_record(&mut self, r: &InternalRecord) -> Result<()> {
        self.add(RecordRef {
            key: r.key,
            seq: r.seq,
            kind: r.kind,
            value: &r.value,
        })
    }

    fn flush_block(&mut self) -> Result<()> {
        let first = self.block.first_key().expect("flushing an empty block");
        self.encoded.clear();
        let len = self.block.finish_into(&mut self.encoded);
        self.out.write_all(&self.encoded)?;
        self.fence_keys.push(first);
        self.handles.push(BlockHandle {
            offset: self.offset,
            length: len as u32,
        });
        self.offset += len as u64;
        self.max_block_len = self.max_block_len.max(len as u32);
        Ok(())
    }

    /// Writes the metadata and footer and syncs the file. An empty builder
    /// produces no file.
    pub fn finish(mut self) -> Result<Option<SstInfo>> {
        if self.keys.is_empty() {
            drop(self.out);
            fs::remove_file(&self.path)?;
            return Ok(None);
        }
        if !self.block.is_empty() {
            self.flush_block()?;
        }
        let data_end = self.offset;
        let bloom = Bloom::build(&self.keys, self.opts.bloom_bits_per_key);
        let started = Instant::now();
        let fence_keys = std::mem::take(&mut self.fence_keys);
        let handles = std::mem::take(&mut self.handles);
        let block_count = handles.len() as u64;
        let index = BlockIndex::build(self.opts.index_kind, fence_keys, handles, self.opts.epsilon)?;
        let index_train_time = started.elapsed();
        let (idx_bytes, off_bytes) = index.serialize();
        let props = Properties {
            min_key: self.keys[0],
            max_key: *self.keys.last().unwrap(),
            record_count: self.keys.len() as u64,
            block_count,
            data_end,
            max_seq: self.max_seq,
            max_block_len: self.max_block_len,
            tombstones: self.tombstones,
            index_kind: self.opts.index_kind,
        };
        let mut meta = Vec::new();
        bloom.serialize_into(&mut meta);
        let bloom_r = Region {
            offset: data_end,
            length: meta.len() as u32,
        };
        let index_r = Region {
            offset: bloom_r.offset + u64::from(bloom_r.length),
            length: idx_bytes.len() as u32,
        };
        meta.extend_from_slice(&idx_bytes);
        let offsets_r = Region {
            offset: index_r.offset + u64::from(index_r.length),
            length: off_bytes.len() as u32,
        };
        meta.extend_from_slice(&off_bytes);
        let props_bytes = props.encode();
        let props_r = Region {
            offset: offsets_r.offset + u64::from(offsets_r.length),
            length: props_bytes.len() as u32,
        };
        meta.extend_from_slice(&props_bytes);
        let footer = Footer {
            bloom: bloom_r,
            index: index_r,
            offsets: offsets_r,
            props: props_r,
            meta_crc: crc32fast::hash(&meta),
        };
        self.out.write_all(&meta)?;
        self.out.write_all(&footer.encode())?;
        let file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(Some(SstInfo {
            path: self.path,
            file_size: data_end + meta.len() as u64 + FOOTER_LEN as u64,
            props,
            bloom_bytes: u64::from(bloom_r.length),
            index_bytes: (idx_bytes.len() + off_bytes.len()) as u64,
            index_train_time,
        }))
    }

    /// Discards the partial file.
    pub fn abandon(self) {
        let path = self.path.clone();
        drop(self.out);
        let _ = fs::remove_file(path);
    }
}

/// Builds a complete SST from an ordered, deduplicated record stream.
pub fn build_sst<'a, I>(path: &Path, records: I, opts: SstOptions) -> Result<Option<SstInfo>>
where
    I: IntoIterator<Item = &'a InternalRecord>,
{
    let mut b = SstBuilder::create(path, opts)?;
    for r in records {
        if let Err(e) = b.add_record(r) {
            b.abandon();
            return Err(e);
        }
    }
    b.finish()
}
