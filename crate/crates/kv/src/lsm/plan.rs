//! Query splitting: resolve as much of a lookup as possible from host-side
//! caches, and emit remote probes only for the tables the cache cannot
//! answer.
//!
//! For one key the candidate tables are consulted newest-first. A cached
//! verdict (value, tombstone, "not in this table", or a Bloom rejection)
//! needs no I/O; a value or tombstone also shadows everything older, so the
//! scan stops there. The probes collected before that point — index block or
//! data block reads, depending on what is cached — become a single chained
//! request. If the chain comes back empty-handed, the shadowing cached
//! answer (the *backstop*) decides.

use std::sync::Arc;

use pushdown_core::formats::sst::{block_find, index_seek, BlockHandle, EntrySearch};
use pushdown_core::functions::sst::{STAGE_DATA, STAGE_INDEX};

use super::cache::BlockCache;
use super::sstable::{key_bytes, SstTable};
use super::LsmError;

/// What the host caches said about one table, without any I/O.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CacheOutcome {
    FoundValue(Vec<u8>),
    FoundTombstone,
    /// Proven absent from this table (cached block or index says so).
    FoundNothing,
    /// Bloom filter rejects the key.
    FilteredOut,
    /// Unresolvable locally; the probe to run remotely.
    NeedsIo { stage: u8, offset: u64, length: u32 },
}

/// Consult only local state for `key` in `table`.
pub fn cache_get(
    table: &SstTable,
    key: u64,
    cache: &BlockCache,
) -> Result<CacheOutcome, LsmError> {
    let kb = key_bytes(key);
    if let Some(bloom) = &table.bloom {
        if !bloom.contains(&kb) {
            return Ok(CacheOutcome::FilteredOut);
        }
    }
    let handle: BlockHandle = if let Some(index) = &table.index {
        // Pinned index: first block whose last key covers ours.
        let i = index.partition_point(|(last, _)| *last < key);
        match index.get(i) {
            Some((_, h)) => *h,
            None => return Ok(CacheOutcome::FoundNothing),
        }
    } else {
        match cache.get(table.inode, table.index_handle.offset) {
            Some(bytes) => match index_seek(&bytes, &kb)? {
                Some(h) => h,
                None => return Ok(CacheOutcome::FoundNothing),
            },
            None => {
                return Ok(CacheOutcome::NeedsIo {
                    stage: STAGE_INDEX,
                    offset: table.index_handle.offset,
                    length: table.index_handle.length,
                })
            }
        }
    };
    match cache.get(table.inode, handle.offset) {
        Some(bytes) => Ok(match block_find(&bytes, &kb)? {
            EntrySearch::Value(v) => CacheOutcome::FoundValue(v),
            EntrySearch::Tombstone => CacheOutcome::FoundTombstone,
            EntrySearch::Absent => CacheOutcome::FoundNothing,
        }),
        None => Ok(CacheOutcome::NeedsIo {
            stage: STAGE_DATA,
            offset: handle.offset,
            length: handle.length,
        }),
    }
}

/// All tables in recency order. Level 0 holds newest-first, possibly
/// overlapping tables; deeper levels are sorted and disjoint.
#[derive(Clone, Default)]
pub struct LevelSet {
    pub levels: Vec<Vec<Arc<SstTable>>>,
}

impl LevelSet {
    pub fn level(&self, i: usize) -> &[Arc<SstTable>] {
        self.levels.get(i).map_or(&[], |l| l.as_slice())
    }

    pub fn level_bytes(&self, i: usize) -> u64 {
        self.level(i).iter().map(|t| t.file_len).sum()
    }

    pub fn table_count(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    pub fn all_empty_below(&self, level: usize) -> bool {
        self.levels.iter().skip(level + 1).all(|l| l.is_empty())
    }

    /// Tables that may hold `key`, newest first.
    pub fn candidates(&self, key: u64) -> Vec<Arc<SstTable>> {
        let mut out = Vec::new();
        for t in self.level(0) {
            if t.min_key <= key && key <= t.max_key {
                out.push(t.clone());
            }
        }
        for level in self.levels.iter().skip(1) {
            let i = level.partition_point(|t| t.max_key < key);
            if let Some(t) = level.get(i) {
                if t.min_key <= key {
                    out.push(t.clone());
                }
            }
        }
        out
    }
}

/// One remote read the cache could not avoid.
#[derive(Clone)]
pub struct Probe {
    pub table: Arc<SstTable>,
    pub stage: u8,
    pub offset: u64,
    pub length: u32,
}

/// The minimal remote work for one lookup, plus the cached answer (if any)
/// that backs the chain when every probe misses.
#[derive(Clone, Default)]
pub struct QueryPlan {
    pub probes: Vec<Probe>,
    /// `Some(Some(v))`: cached value. `Some(None)`: cached tombstone.
    /// `None`: exhaustion means the key does not exist.
    pub backstop: Option<Option<Vec<u8>>>,
}

impl QueryPlan {
    /// The answer when no probes are needed at all.
    pub fn local_answer(&self) -> Option<Option<Vec<u8>>> {
        self.probes
            .is_empty()
            .then(|| self.backstop.clone().unwrap_or(None))
    }
}

/// Run [`cache_get`] over the candidates and split the query: everything
/// answerable locally stays local, the rest becomes ordered probes. Stops at
/// the first locally-answered table since older tables are shadowed by it.
pub fn build_plan(
    candidates: &[Arc<SstTable>],
    key: u64,
    cache: &BlockCache,
) -> Result<QueryPlan, LsmError> {
    let mut plan = QueryPlan::default();
    for table in candidates {
        match cache_get(table, key, cache)? {
            CacheOutcome::FoundValue(v) => {
                plan.backstop = Some(Some(v));
                break;
            }
            CacheOutcome::FoundTombstone => {
                plan.backstop = Some(None);
                break;
            }
            CacheOutcome::FoundNothing | CacheOutcome::FilteredOut => continue,
            CacheOutcome::NeedsIo { stage, offset, length } => {
                plan.probes.push(Probe { table: table.clone(), stage, offset, length });
            }
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsm::sstable::{write_sst, SstWriteOpts};
    use pushdown_core::block::BlockDevice;
    use pushdown_core::store::{ExtentStore, StoreConfig};

    fn store() -> Arc<ExtentStore> {
        ExtentStore::new(
            Arc::new(BlockDevice::memory(512, 1 << 15)),
            StoreConfig::default(),
        )
    }

    fn table(
        store: &Arc<ExtentStore>,
        name: &str,
        entries: &[(u64, Option<&str>)],
        opts: &SstWriteOpts,
    ) -> Arc<SstTable> {
        let owned: Vec<(u64, Option<Vec<u8>>)> = entries
            .iter()
            .map(|(k, v)| (*k, v.map(|s| s.as_bytes().to_vec())))
            .collect();
        write_sst(store, name, &owned, opts).unwrap()
    }

    fn warm(cache: &BlockCache, t: &SstTable, store: &Arc<ExtentStore>, key: u64) {
        // Load the data block covering `key` into the cache, host-side.
        let index = t.index_entries().unwrap();
        let i = index.partition_point(|(last, _)| *last < key);
        let (_, h) = index[i];
        let bytes = store.read_local(t.inode, h.offset, h.length as u64).unwrap();
        cache.insert(t.inode, h.offset, Arc::new(bytes));
    }

    #[test]
    fn pinned_index_outcomes() {
        let s = store();
        let t = table(&s, "a", &[(10, Some("x")), (20, None), (30, Some("z"))],
            &SstWriteOpts::default());
        let cache = BlockCache::new(1 << 20);
        // Index pinned but data not cached: everything inside the key range
        // needs one data-block read.
        for k in [10, 15, 20, 30] {
            assert!(matches!(
                cache_get(&t, k, &cache).unwrap(),
                CacheOutcome::NeedsIo { stage: STAGE_DATA, .. }
            ));
        }
        // Past the last key the pinned index itself is authoritative.
        assert_eq!(cache_get(&t, 31, &cache).unwrap(), CacheOutcome::FoundNothing);
        warm(&cache, &t, &s, 10);
        assert_eq!(
            cache_get(&t, 10, &cache).unwrap(),
            CacheOutcome::FoundValue(b"x".to_vec())
        );
        assert_eq!(cache_get(&t, 20, &cache).unwrap(), CacheOutcome::FoundTombstone);
        assert_eq!(cache_get(&t, 15, &cache).unwrap(), CacheOutcome::FoundNothing);
    }

    #[test]
    fn unpinned_index_probes_start_at_the_index() {
        let s = store();
        let opts = SstWriteOpts { pin_index: false, ..Default::default() };
        let t = table(&s, "a", &[(1, Some("v"))], &opts);
        let cache = BlockCache::new(1 << 20);
        assert!(matches!(
            cache_get(&t, 1, &cache).unwrap(),
            CacheOutcome::NeedsIo { stage: STAGE_INDEX, .. }
        ));
        // Cache the index block: the probe advances to the data stage.
        let bytes = s
            .read_local(t.inode, t.index_handle.offset, t.index_handle.length as u64)
            .unwrap();
        cache.insert(t.inode, t.index_handle.offset, Arc::new(bytes));
        assert!(matches!(
            cache_get(&t, 1, &cache).unwrap(),
            CacheOutcome::NeedsIo { stage: STAGE_DATA, .. }
        ));
    }

    #[test]
    fn bloom_filters_cut_absent_keys() {
        let s = store();
        let opts = SstWriteOpts { bloom_bits_per_key: 10, ..Default::default() };
        let entries: Vec<(u64, Option<&str>)> = vec![(2, Some("a")), (4, Some("b"))];
        let t = table(&s, "a", &entries, &opts);
        let cache = BlockCache::new(0);
        assert!(matches!(
            cache_get(&t, 2, &cache).unwrap(),
            CacheOutcome::NeedsIo { .. }
        ));
        // 3 is absent; with only two keys the filter is near-perfect.
        assert_eq!(cache_get(&t, 3, &cache).unwrap(), CacheOutcome::FilteredOut);
    }

    #[test]
    fn candidate_selection_respects_levels_and_ranges() {
        let s = store();
        let o = SstWriteOpts::default();
        let newest = table(&s, "l0b", &[(5, Some("new"))], &o);
        let older = table(&s, "l0a", &[(1, Some("old")), (9, Some("q"))], &o);
        let l1a = table(&s, "l1a", &[(0, Some("x")), (4, Some("y"))], &o);
        let l1b = table(&s, "l1b", &[(6, Some("z")), (12, Some("w"))], &o);
        let set = LevelSet {
            levels: vec![vec![newest.clone(), older.clone()], vec![l1a.clone(), l1b.clone()]],
        };
        let inodes =
            |key: u64| -> Vec<u64> { set.candidates(key).iter().map(|t| t.inode).collect() };
        assert_eq!(inodes(5), vec![newest.inode, older.inode]);
        assert_eq!(inodes(4), vec![older.inode, l1a.inode]);
        assert_eq!(inodes(12), vec![l1b.inode]);
        assert_eq!(inodes(13), Vec::<u64>::new());
        assert_eq!(inodes(5).len(), 2, "l1 gap between 4 and 6 excludes both");
    }

    #[test]
    fn plan_stops_at_first_local_answer() {
        let s = store();
        let o = SstWriteOpts::default();
        let t0 = table(&s, "t0", &[(7, Some("v0"))], &o);
        let t1 = table(&s, "t1", &[(7, Some("v1"))], &o);
        let t2 = table(&s, "t2", &[(7, Some("v2"))], &o);
        let cache = BlockCache::new(1 << 20);
        let cands = vec![t0.clone(), t1.clone(), t2.clone()];

        // Nothing cached: all three need I/O, no backstop.
        let plan = build_plan(&cands, 7, &cache).unwrap();
        assert_eq!(plan.probes.len(), 3);
        assert!(plan.backstop.is_none());
        assert!(plan.local_answer().is_none());

        // Middle table cached: probes stop there, deeper table excluded.
        warm(&cache, &t1, &s, 7);
        let plan = build_plan(&cands, 7, &cache).unwrap();
        assert_eq!(plan.probes.len(), 1);
        assert_eq!(plan.probes[0].table.inode, t0.inode);
        assert_eq!(plan.backstop, Some(Some(b"v1".to_vec())));

        // Newest also cached: fully local, shadowing answer wins.
        warm(&cache, &t0, &s, 7);
        let plan = build_plan(&cands, 7, &cache).unwrap();
        assert!(plan.probes.is_empty());
        assert_eq!(plan.local_answer(), Some(Some(b"v0".to_vec())));
    }
}
