//! Byte-budgeted LRU cache of decoded data blocks.

use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;

use super::block::Block;

const SHARDS: usize = 16;

type CacheKey = (u64, u32);

struct Shard {
    map: LruCache<CacheKey, Arc<Block>>,
    bytes: usize,
}

pub struct BlockCache {
    shards: Vec<Mutex<Shard>>,
    shard_budget: usize,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl BlockCache {
    pub fn new(budget_bytes: usize) -> Self {
        BlockCache {
            shards: (0..SHARDS)
                .map(|_| {
                    Mutex::new(Shard {
                        map: LruCache::unbounded(),
                        bytes: 0,
                    })
                })
                .collect(),
            shard_budget: budget_bytes / SHARDS,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    fn shard(&self, key: CacheKey) -> &Mutex<Shard> {
        let h = (key.0.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ u64::from(key.1)).wrapping_mul(0xff51_afd7_ed55_8ccd);
        &self.shards[(h >> 60) as usize % SHARDS]
    }

    pub fn get(&self, file: u64, block: u32) -> Option<Arc<Block>> {
        let found = self.shard((file, block)).lock().map.get(&(file, block)).cloned();
        if found.is_some() {
            self.hits.fetch_add(1, Relaxed);
        } else {
            self.misses.fetch_add(1, Relaxed);
        }
        found
    }

    pub fn insert(&self, file: u64, block: u32, value: Arc<Block>) {
        let size = value.byte_len();
        if size > self.shard_budget {
            return;
        }
        let mut s = self.shard((file, block)).lock();
        if let Some(old) = s.map.put((file, block), value) {
            s.bytes -= old.byte_len();
        }
        s.bytes += size;
        while s.bytes > self.shard_budget {
            match s.map.pop_lru() {
                Some((_, b)) => s.bytes -= b.byte_len(),
                None => break,
            }
        }
    }

    pub fn bytes(&self) -> usize {
        self.shards.iter().map(|s| s.lock().bytes).sum()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Relaxed)
    }
}
