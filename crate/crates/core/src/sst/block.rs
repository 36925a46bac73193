//! Data blocks: `[records][u32 record offsets][u32 count][u32 crc32]`.
//!
//! Records use the core wire format; the offsets trailer makes the
//! variable-length records binary-searchable.

use crate::error::{Error, Result};
use crate::types::{decode_ref, peek_key, RecordRef};

/// Bytes of trailer beyond the per-record offsets: count plus checksum.
pub const BLOCK_FIXED_TRAILER: usize = 8;

/// Encoded size of a block holding records totalling `record_bytes`.
pub fn block_size(record_bytes: usize, records: usize) -> usize {
    record_bytes + 4 * records + BLOCK_FIXED_TRAILER
}

#[derive(Default)]
pub struct BlockBuilder {
    buf: Vec<u8>,
    offsets: Vec<u32>,
    first_key: Option<u64>,
}

impl BlockBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn first_key(&self) -> Option<u64> {
        self.first_key
    }

    /// Encoded size if a record of `record_len` bytes were added.
    pub fn size_with(&self, record_len: usize) -> usize {
        block_size(self.buf.len() + record_len, self.offsets.len() + 1)
    }

    pub fn encoded_size(&self) -> usize {
        block_size(self.buf.len(), self.offsets.len())
    }

    /// Appends an already-encoded record.
    pub fn push_encoded(&mut self, key: u64, record: &[u8]) {
        if self.first_key.is_none() {
            self.first_key = Some(key);
        }
        self.offsets.push(self.buf.len() as u32);
        self.buf.extend_from_slice(record);
    }

    /// Writes the finished block to `out` and resets the builder.
    pub fn finish_into(&mut self, out: &mut Vec<u8>) -> usize {
        let start = out.len();
        out.extend_from_slice(&self.buf);
        for o in &self.offsets {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.extend_from_slice(&(self.offsets.len() as u32).to_le_bytes());
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        self.buf.clear();
        self.offsets.clear();
        self.first_key = None;
        out.len() - start
    }
}

/// A decoded, checksum-verified block.
#[derive(Debug)]
pub struct Block {
    data: Vec<u8>,
    count: usize,
    offsets_at: usize,
}

impl Block {
    pub fn decode(data: Vec<u8>) -> Result<Block> {
        let n = data.len();
        if n < BLOCK_FIXED_TRAILER {
            return Err(Error::ChecksumMismatch("data block"));
        }
        let stored = u32::from_le_bytes(data[n - 4..].try_into().unwrap());
        if crc32fast::hash(&data[..n - 4]) != stored {
            return Err(Error::ChecksumMismatch("data block"));
        }
        let count = u32::from_le_bytes(data[n - 8..n - 4].try_into().unwrap()) as usize;
        let offsets_at = (n - BLOCK_FIXED_TRAILER)
            .checked_sub(count * 4)
            .ok_or(Error::MalformedRecord("block offsets overflow"))?;
        let block = Block { data, count, offsets_at };
        for i in 0..count {
            if block.offset(i) + crate::types::RECORD_HEADER_LEN > offsets_at {
                return Err(Error::MalformedRecord("block offset out of range"));
            }
        }
        Ok(block)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    fn offset(&self, i: usize) -> usize {
        let at = self.offsets_at + 4 * i;
        u32::from_le_bytes(self.data[at..at + 4].try_into().unwrap()) as usize
    }

    pub fn key_at(&self, i: usize) -> u64 {
        peek_key(&self.data[self.offset(i)..self.offsets_at]).unwrap_or(0)
    }

    pub fn record_at(&self, i: usize) -> Result<RecordRef<'_>> {
        decode_ref(&self.data[self.offset(i)..self.offsets_at]).map(|(r, _)| r)
    }

    pub fn first_key(&self) -> Option<u64> {
        (self.count > 0).then(|| self.key_at(0))
    }

    pub fn last_key(&self) -> Option<u64> {
        (self.count > 0).then(|| self.key_at(self.count - 1))
    }

    /// Index of the first record with key >= `key`.
    pub fn lower_bound(&self, key: u64) -> usize {
        let (mut lo, mut hi) = (0, self.count);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.key_at(mid) < key {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Binary search over the record offsets.
    pub fn search(&self, key: u64) -> Result<Option<RecordRef<'_>>> {
        let i = self.lower_bound(key);
        if i < self.count && self.key_at(i) == key {
            self.record_at(i).map(Some)
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{InternalRecord, OpKind, UserKey};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(records: &[InternalRecord]) -> Block {
        let mut b = BlockBuilder::new();
        for r in records {
            b.push_encoded(r.key.0, &r.encode().unwrap());
        }
        let mut out = Vec::new();
        let n = b.finish_into(&mut out);
        assert_eq!(n, out.len());
        Block::decode(out).unwrap()
    }

    #[test]
    fn single_record_block() {
        let b = build(&[InternalRecord::put(7u64, 1, b"seven".to_vec())]);
        let r = b.search(7).unwrap().unwrap();
        assert_eq!((r.key, r.value), (UserKey(7), &b"seven"[..]));
        assert!(b.search(6).unwrap().is_none());
        assert!(b.search(8).unwrap().is_none());
    }

    #[test]
    fn key_between_records_is_absent() {
        let b = build(&[
            InternalRecord::put(10u64, 1, b"a".to_vec()),
            InternalRecord::delete(20u64, 2),
        ]);
        assert!(b.search(15).unwrap().is_none());
        assert_eq!(b.search(20).unwrap().unwrap().kind, OpKind::Delete);
    }

    #[test]
    fn size_accounting_matches_encoding() {
        let recs: Vec<_> = (0..5u64).map(|k| InternalRecord::put(k, k, vec![0u8; k as usize * 3])).collect();
        let mut b = BlockBuilder::new();
        let mut expected = BLOCK_FIXED_TRAILER;
        for r in &recs {
            expected += r.encoded_len() + 4;
            assert_eq!(b.size_with(r.encoded_len()), expected);
            b.push_encoded(r.key.0, &r.encode().unwrap());
        }
        assert_eq!(b.encoded_size(), expected);
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = BlockBuilder::new();
        let r = InternalRecord::put(1u64, 1, b"x".to_vec());
        b.push_encoded(1, &r.encode().unwrap());
        let mut out = Vec::new();
        b.finish_into(&mut out);
        out[3] ^= 1;
        assert!(matches!(Block::decode(out), Err(Error::ChecksumMismatch(_))));
    }

    #[test]
    fn search_agrees_with_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1..40);
            let mut keys: Vec<u64> = (0..n).map(|_| rng.random_range(0..1000)).collect();
            keys.sort_unstable();
            keys.dedup();
            let recs: Vec<_> = keys
                .iter()
                .map(|&k| InternalRecord::put(k, k, vec![b'v'; rng.random_range(0..30)]))
                .collect();
            let block = build(&recs);
            for _ in 0..500 {
                let q = rng.random_range(0..1001);
                let linear = recs.iter().find(|r| r.key.0 == q);
                let found = block.search(q).unwrap().map(|r| r.to_owned());
                assert_eq!(found.as_ref(), linear);
            }
        }
    }
}
