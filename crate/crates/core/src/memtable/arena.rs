//! Append-only record storage for a memtable.
//!
//! Records are written once in the core wire format into fixed-size chunks
//! and never move, so a handle (`chunk << 32 | offset`) stays valid for the
//! arena's lifetime. Space is reserved under a short mutex; the bytes are
//! copied afterwards without holding it.

use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicUsize, Ordering};

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::types::{decode_ref, OpKind, RecordRef, UserKey, MAX_SEQ, MAX_VALUE_LEN, RECORD_HEADER_LEN};

const DEFAULT_CHUNK: usize = 4 << 20;
const MIN_CHUNK: usize = 256 << 10;
const MAX_RECORD: usize = RECORD_HEADER_LEN + MAX_VALUE_LEN;

struct Cursor {
    chunk: usize,
    offset: usize,
    used: usize,
    allocated: usize,
}

pub struct Arena {
    chunk_size: usize,
    chunks: Box<[AtomicPtr<u8>]>,
    cursor: Mutex<Cursor>,
    used: AtomicUsize,
    budget: usize,
}

// SAFETY: chunk memory is only written inside regions reserved exclusively by
// one `append` call and is read only through handles published after that
// write completed.
unsafe impl Send for Arena {}
unsafe impl Sync for Arena {}

impl Arena {
    pub fn new(budget: usize) -> Self {
        let chunk_size = budget.clamp(MIN_CHUNK, DEFAULT_CHUNK);
        let max_chunks = (budget + MAX_RECORD) / (chunk_size - MAX_RECORD) + 2;
        let chunks = (0..max_chunks)
            .map(|_| AtomicPtr::new(ptr::null_mut()))
            .collect();
        Arena {
            chunk_size,
            chunks,
            cursor: Mutex::new(Cursor {
                chunk: 0,
                offset: 0,
                used: 0,
                allocated: 0,
            }),
            used: AtomicUsize::new(0),
            budget,
        }
    }

    /// Sum of encoded record sizes appended so far.
    pub fn bytes_used(&self) -> usize {
        self.used.load(Ordering::Acquire)
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Bytes of chunk memory allocated.
    pub fn allocated_bytes(&self) -> usize {
        self.cursor.lock().allocated * self.chunk_size
    }

    /// Appends one record and returns its handle. Fails with `MemtableFull`
    /// if the record would push usage past the budget (unless the arena is
    /// still empty).
    pub fn append(&self, key: UserKey, seq: u64, kind: OpKind, value: &[u8]) -> Result<u64> {
        if value.len() > MAX_VALUE_LEN {
            return Err(Error::ValueTooLarge(value.len()));
        }
        if kind == OpKind::Delete && !value.is_empty() {
            return Err(Error::MalformedRecord("tombstone with a value"));
        }
        if seq > MAX_SEQ {
            return Err(Error::MalformedRecord("sequence number exceeds 63 bits"));
        }
        let len = RECORD_HEADER_LEN + value.len();
        let (chunk, offset, base) = {
            let mut cur = self.cursor.lock();
            if cur.used > 0 && cur.used + len > self.budget {
                return Err(Error::MemtableFull);
            }
            if cur.allocated == 0 || cur.offset + len > self.chunk_size {
                let next = cur.allocated;
                if next >= self.chunks.len() {
                    return Err(Error::MemtableFull);
                }
                let mem = vec![0u8; self.chunk_size].into_boxed_slice();
                self.chunks[next].store(Box::into_raw(mem) as *mut u8, Ordering::Release);
                cur.allocated += 1;
                cur.chunk = next;
                cur.offset = 0;
            }
            let at = (cur.chunk, cur.offset, self.chunks[cur.chunk].load(Ordering::Acquire));
            cur.offset += len;
            cur.used += len;
            self.used.store(cur.used, Ordering::Release);
            at
        };

        let packed = (seq << 1) | u64::from(kind == OpKind::Put);
        // SAFETY: [offset, offset + len) lies inside the chunk and was reserved
        // for this call alone under the cursor mutex.
        unsafe {
            let dst = base.add(offset);
            ptr::copy_nonoverlapping(key.0.to_be_bytes().as_ptr(), dst, 8);
            ptr::copy_nonoverlapping(packed.to_le_bytes().as_ptr(), dst.add(8), 8);
            ptr::copy_nonoverlapping((value.len() as u32).to_le_bytes().as_ptr(), dst.add(16), 4);
            ptr::copy_nonoverlapping(value.as_ptr(), dst.add(RECORD_HEADER_LEN), value.len());
        }
        Ok(((chunk as u64) << 32) | offset as u64)
    }

    fn bytes_at(&self, handle: u64) -> &[u8] {
        let chunk = (handle >> 32) as usize;
        let offset = (handle & 0xffff_ffff) as usize;
        let base = self
            .chunks
            .get(chunk)
            .map(|p| p.load(Ordering::Acquire))
            .filter(|p| !p.is_null() && offset < self.chunk_size)
            .expect("arena handle out of range");
        // SAFETY: chunks are zero-initialised, live as long as the arena, and
        // are never reallocated; the slice stays within the chunk.
        unsafe { std::slice::from_raw_parts(base.add(offset), self.chunk_size - offset) }
    }

    /// The record stored under `handle`, which must come from `append` on
    /// this arena.
    pub fn record(&self, handle: u64) -> RecordRef<'_> {
        decode_ref(self.bytes_at(handle))
            .expect("arena record is well formed")
            .0
    }

    /// Sequence number of the record under `handle`.
    #[inline]
    pub fn seq(&self, handle: u64) -> u64 {
        let b = self.bytes_at(handle);
        u64::from_le_bytes(b[8..16].try_into().unwrap()) >> 1
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        for slot in self.chunks.iter() {
            let p = slot.load(Ordering::Acquire);
            if !p.is_null() {
                // SAFETY: produced by Box::into_raw on a boxed slice of
                // `chunk_size` bytes and freed exactly once here.
                unsafe {
                    drop(Box::from_raw(ptr::slice_from_raw_parts_mut(p, self.chunk_size)));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn append_and_read_back() {
        let a = Arena::new(1 << 20);
        let h1 = a.append(UserKey(7), 3, OpKind::Put, b"hello").unwrap();
        let h2 = a.append(UserKey(9), 4, OpKind::Delete, b"").unwrap();
        let r1 = a.record(h1);
        assert_eq!((r1.key, r1.seq, r1.kind, r1.value), (UserKey(7), 3, OpKind::Put, &b"hello"[..]));
        let r2 = a.record(h2);
        assert_eq!((r2.key, r2.seq, r2.kind), (UserKey(9), 4, OpKind::Delete));
        assert_eq!(a.seq(h1), 3);
        assert_eq!(a.bytes_used(), 2 * RECORD_HEADER_LEN + 5);
    }

    #[test]
    fn budget_allows_at_most_one_record_over() {
        let a = Arena::new(1000);
        let big = vec![1u8; 2000];
        a.append(UserKey(1), 1, OpKind::Put, &big).unwrap();
        assert!(matches!(
            a.append(UserKey(2), 2, OpKind::Put, b"x"),
            Err(Error::MemtableFull)
        ));

        let a = Arena::new(1 << 20);
        let v = vec![0u8; 100];
        let mut n = 0;
        while a.append(UserKey(n), n, OpKind::Put, &v).is_ok() {
            n += 1;
        }
        assert!(a.bytes_used() <= a.budget());
        assert_eq!(n as usize, (1 << 20) / 120);
    }

    #[test]
    fn records_span_many_chunks() {
        let a = Arena::new(8 << 20);
        let v = vec![7u8; 60_000];
        let hs: Vec<u64> = (0..130)
            .map(|i| a.append(UserKey(i), i, OpKind::Put, &v).unwrap())
            .collect();
        assert!(a.allocated_bytes() > 4 << 20);
        for (i, h) in hs.into_iter().enumerate() {
            let r = a.record(h);
            assert_eq!(r.key, UserKey(i as u64));
            assert_eq!(r.value.len(), 60_000);
        }
    }

    #[test]
    fn concurrent_appends_are_disjoint() {
        let a = Arc::new(Arena::new(64 << 20));
        let threads: Vec<_> = (0..8u64)
            .map(|t| {
                let a = a.clone();
                std::thread::spawn(move || {
                    (0..2000u64)
                        .map(|i| {
                            let k = t * 10_000 + i;
                            (k, a.append(UserKey(k), k, OpKind::Put, &k.to_le_bytes()).unwrap())
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for t in threads {
            for (k, h) in t.join().unwrap() {
                let r = a.record(h);
                assert_eq!(r.key, UserKey(k));
                assert_eq!(r.value, &k.to_le_bytes());
            }
        }
    }

    #[test]
    fn rejects_invalid_records() {
        let a = Arena::new(1 << 20);
        assert!(a.append(UserKey(1), 1, OpKind::Delete, b"x").is_err());
        assert!(matches!(
            a.append(UserKey(1), 1, OpKind::Put, &vec![0; MAX_VALUE_LEN + 1]),
            Err(Error::ValueTooLarge(_))
        ));
        assert_eq!(a.bytes_used(), 0);
    }
}
