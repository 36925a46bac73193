//! Write-ahead log: one segment per memtable, records framed as
//! `[len u32][crc32 u32][record]`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::types::{decode_prefix, encode_parts, InternalRecord, OpKind, UserKey};

pub fn wal_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("WAL-{id:06}.log"))
}

/// Parses `WAL-<id>.log`.
pub fn parse_wal_name(name: &str) -> Option<u64> {
    name.strip_prefix("WAL-")?.strip_suffix(".log")?.parse().ok()
}

pub struct WalWriter {
    out: BufWriter<File>,
    sync: bool,
    scratch: Vec<u8>,
}

impl WalWriter {
    pub fn create(path: &Path, sync: bool) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(WalWriter {
            out: BufWriter::with_capacity(64 << 10, file),
            sync,
            scratch: Vec::with_capacity(256),
        })
    }

    /// Appends one record and hands it to the OS (or the device, with sync).
    pub fn append(&mut self, key: UserKey, seq: u64, kind: OpKind, value: &[u8]) -> Result<()> {
        self.scratch.clear();
        self.scratch.extend_from_slice(&[0u8; 8]);
        encode_parts(key, seq, kind, value, &mut self.scratch)?;
        let len = (self.scratch.len() - 8) as u32;
        let crc = crc32fast::hash(&self.scratch[8..]);
        self.scratch[0..4].copy_from_slice(&len.to_le_bytes());
        self.scratch[4..8].copy_from_slice(&crc.to_le_bytes());
        self.out.write_all(&self.scratch)?;
        self.out.flush()?;
        if self.sync {
            self.out.get_ref().sync_data()?;
        }
        Ok(())
    }

    pub fn sync(&mut self) -> Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(())
    }
}

/// Reads every intact record of a segment. A torn or corrupt tail is cut off
/// and the file truncated to the last valid record.
pub fn replay(path: &Path) -> Result<Vec<InternalRecord>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + 8 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let end = pos + 8 + len;
        if end > bytes.len() || crc32fast::hash(&bytes[pos + 8..end]) != crc {
            break;
        }
        match decode_prefix(&bytes[pos + 8..end]) {
            Ok((rec, used)) if used == len => out.push(rec),
            _ => break,
        }
        pos = end;
    }
    if pos < bytes.len() {
        log::warn!("truncating {} at byte {pos} of {}", path.display(), bytes.len());
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(pos as u64)?;
        f.sync_all()?;
    }
    Ok(out)
}
