//! Host-side caches: a byte-budgeted LRU over raw table blocks keyed by
//! (inode, file offset), and a count-budgeted LRU over final lookup results.
//!
//! Both are safe to share across reader threads; a zero budget disables a
//! cache entirely (every probe reports a miss, inserts are dropped).

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;

struct BlockCacheInner {
    lru: LruCache<(u64, u64), Arc<Vec<u8>>>,
    bytes: usize,
}

pub struct BlockCache {
    inner: Option<Mutex<BlockCacheInner>>,
    budget: usize,
    hits: AtomicU64,
    misses: AtomicU64,
    inserts: AtomicU64,
}

impl BlockCache {
    pub fn new(budget_bytes: usize) -> BlockCache {
        BlockCache {
            inner: (budget_bytes > 0).then(|| {
                Mutex::new(BlockCacheInner { lru: LruCache::unbounded(), bytes: 0 })
            }),
            budget: budget_bytes,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            inserts: AtomicU64::new(0),
        }
    }

    pub fn get(&self, inode: u64, offset: u64) -> Option<Arc<Vec<u8>>> {
        let Some(inner) = &self.inner else {
            self.misses.fetch_add(1, Ordering::Relaxed);
            return None;
        };
        let got = inner.lock().lru.get(&(inode, offset)).cloned();
        match got {
            Some(b) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(b)
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn insert(&self, inode: u64, offset: u64, block: Arc<Vec<u8>>) {
        let Some(inner) = &self.inner else { return };
        if block.len() > self.budget {
            return;
        }
        self.inserts.fetch_add(1, Ordering::Relaxed);
        let mut inner = inner.lock();
        if let Some(old) = inner.lru.put((inode, offset), block.clone()) {
            inner.bytes -= old.len();
        }
        inner.bytes += block.len();
        while inner.bytes > self.budget {
            let (_, evicted) = inner.lru.pop_lru().expect("bytes > 0 implies entries");
            inner.bytes -= evicted.len();
        }
    }

    /// Drop every block belonging to `inode` (the file is gone).
    pub fn purge_inode(&self, inode: u64) {
        let Some(inner) = &self.inner else { return };
        let mut inner = inner.lock();
        let doomed: Vec<(u64, u64)> = inner
            .lru
            .iter()
            .map(|(k, _)| *k)
            .filter(|(i, _)| *i == inode)
            .collect();
        for key in doomed {
            if let Some(old) = inner.lru.pop(&key) {
                inner.bytes -= old.len();
            }
        }
    }

    pub fn bytes(&self) -> usize {
        self.inner.as_ref().map_or(0, |i| i.lock().bytes)
    }

    pub fn len(&self) -> usize {
        self.inner.as_ref().map_or(0, |i| i.lock().lru.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inserts(&self) -> u64 {
        self.inserts.load(Ordering::Relaxed)
    }
}

/// Final results of recent lookups; `Some(None)` caches a confirmed miss.
pub struct RowCache {
    inner: Option<Mutex<LruCache<u64, Option<Arc<Vec<u8>>>>>>,
    hits: AtomicU64,
}

impl RowCache {
    pub fn new(max_entries: usize) -> RowCache {
        RowCache {
            inner: NonZeroUsize::new(max_entries).map(|n| Mutex::new(LruCache::new(n))),
            hits: AtomicU64::new(0),
        }
    }

    pub fn get(&self, key: u64) -> Option<Option<Arc<Vec<u8>>>> {
        let got = self.inner.as_ref()?.lock().get(&key).cloned();
        if got.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        got
    }

    pub fn insert(&self, key: u64, value: Option<Arc<Vec<u8>>>) {
        if let Some(inner) = &self.inner {
            inner.lock().put(key, value);
        }
    }

    /// The key is being rewritten; any cached result is stale.
    pub fn invalidate(&self, key: u64) {
        if let Some(inner) = &self.inner {
            inner.lock().pop(&key);
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.inner.as_ref().map_or(0, |i| i.lock().len())
    }
}
