//! Leveled LSM key-value store whose reads run as chained remote probes.
//!
//! Writes land in a memtable; flushes and whole-level compactions produce
//! immutable sorted tables on the extent store. A read first splits against
//! host-side caches ([`plan`]): every table the cache can answer stays
//! local, the remainder becomes one chained pushdown executed at the target
//! (or a block-by-block walk in baseline mode). A sampling policy sends a
//! small fraction of pushdown-eligible reads down the block-wise path so the
//! cache keeps seeing blocks it would otherwise never receive.
//!
//! Concurrency: one writer at a time (enforced internally), any number of
//! concurrent readers. Readers never block on flush or compaction; they see
//! the previous table set until the swap, and open file handles keep
//! replaced tables readable until the last reader drops them.

pub mod cache;
pub mod compact;
pub mod memtable;
pub mod plan;
pub mod sstable;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pushdown_core::formats::sst::{block_find, index_seek, EntrySearch, SstError};
use pushdown_core::functions::sst::{
    chain_scratch, initial_read, parse_chain_result, ChainResult, PlanEntry, STAGE_INDEX,
};
use pushdown_core::functions::FN_SST_CHAIN;
use pushdown_core::host::{AbortReason, HostClient, PushdownStatus, RequestStats};
use pushdown_core::store::StoreError;
use pushdown_core::sync::SyncError;
use pushdown_core::wire::MAX_PUSHDOWN_FDS;

use crate::Mode;
use cache::{BlockCache, RowCache};
use memtable::Memtable;
use plan::{build_plan, LevelSet, QueryPlan};
use sstable::{key_bytes, SstTable, SstWriteOpts};

pub use plan::{cache_get, CacheOutcome, Probe};

#[derive(Debug, thiserror::Error)]
pub enum LsmError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("table format: {0}")]
    Sst(#[from] SstError),
    #[error("metadata sync: {0}")]
    Sync(#[from] SyncError),
    #[error("extent maps kept changing; lookup could not settle")]
    VersionChurn,
    #[error("remote read failed: {0:?}")]
    ReadFailed(AbortReason),
    #[error("data damaged: {0}")]
    Corrupt(&'static str),
    #[error("value exceeds the configured maximum")]
    ValueTooLarge,
}

/// What completed reads are allowed to leave behind in the caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CachePolicy {
    /// Completed lookups cache their final result; block-wise reads also
    /// cache every block they transfer. Pushdowns never cache intermediate
    /// blocks — they were never sent to the host.
    InsertFinal,
    /// Reads insert nothing. Caching under pushdown can cost more than it
    /// saves; this knob measures that.
    NoDataCache,
}

#[derive(Clone, Debug)]
pub struct LsmConfig {
    pub mode: Mode,
    pub cache_policy: CachePolicy,
    pub block_cache_bytes: usize,
    pub row_cache_entries: usize,
    /// Fraction of pushdown-eligible reads diverted to the block-wise path
    /// to keep the block cache populated.
    pub sampling_rate: f64,
    pub sampling_seed: u64,
    /// 0 disables Bloom filters.
    pub bloom_bits_per_key: u32,
    pub pin_index: bool,
    pub memtable_bytes: usize,
    pub l0_trigger: usize,
    pub level_ratio: u64,
    pub l1_bytes: u64,
    pub file_bytes: u64,
    pub data_block_bytes: usize,
    pub max_value_bytes: usize,
    /// Ship extent maps synchronously when tables are created or replaced.
    /// Off, the background daemon (or the next read's retry) picks them up.
    pub sync_on_publish: bool,
}

impl Default for LsmConfig {
    fn default() -> Self {
        LsmConfig {
            mode: Mode::Pushdown,
            cache_policy: CachePolicy::InsertFinal,
            block_cache_bytes: 8 << 20,
            row_cache_entries: 4096,
            sampling_rate: 0.01,
            sampling_seed: 0x5eed,
            bloom_bits_per_key: 0,
            pin_index: true,
            memtable_bytes: 256 << 10,
            l0_trigger: 4,
            level_ratio: 10,
            l1_bytes: 1 << 20,
            file_bytes: 256 << 10,
            data_block_bytes: 4096,
            max_value_bytes: 4096,
            sync_on_publish: true,
        }
    }
}

#[derive(Default)]
struct Counters {
    puts: AtomicU64,
    deletes: AtomicU64,
    gets: AtomicU64,
    memtable_hits: AtomicU64,
    row_cache_hits: AtomicU64,
    local_answers: AtomicU64,
    sampling_decisions: AtomicU64,
    sampled_reads: AtomicU64,
    pushdowns: AtomicU64,
    pushdowns_completed: AtomicU64,
    target_fallbacks: AtomicU64,
    wide_plan_fallbacks: AtomicU64,
    churn_retries: AtomicU64,
    flushes: AtomicU64,
    compactions: AtomicU64,
    round_trips: AtomicU64,
    resubmissions: AtomicU64,
    device_reads: AtomicU64,
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
}

/// Point-in-time copy of every store counter.
#[derive(Clone, Copy, Debug, Default)]
pub struct LsmStats {
    pub puts: u64,
    pub deletes: u64,
    pub gets: u64,
    pub memtable_hits: u64,
    pub row_cache_hits: u64,
    /// Lookups fully answered by query splitting, zero remote messages.
    pub local_answers: u64,
    pub sampling_decisions: u64,
    /// Sampled reads that ran the block-wise path to completion.
    pub sampled_reads: u64,
    pub pushdowns: u64,
    pub pushdowns_completed: u64,
    pub target_fallbacks: u64,
    pub wide_plan_fallbacks: u64,
    /// Version-churn aborts that were retried (and recovered).
    pub churn_retries: u64,
    pub flushes: u64,
    pub compactions: u64,
    pub round_trips: u64,
    pub resubmissions: u64,
    pub device_reads: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub block_cache_hits: u64,
    pub block_cache_misses: u64,
    pub block_cache_bytes: u64,
    pub row_cache_len: u64,
}

impl LsmStats {
    pub fn sampled_fraction(&self) -> f64 {
        if self.sampling_decisions == 0 {
            return 0.0;
        }
        self.sampled_reads as f64 / self.sampling_decisions as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub level: usize,
    pub inode: u64,
    pub n_entries: u64,
    pub min_key: u64,
    pub max_key: u64,
    pub file_bytes: u64,
}

struct State {
    mem: Memtable,
    /// Memtable being flushed; still visible to readers.
    imm: Option<Arc<Memtable>>,
    levels: Arc<LevelSet>,
}

pub struct LsmStore {
    client: Arc<HostClient>,
    config: LsmConfig,
    state: RwLock<State>,
    /// Serializes put/delete/flush/compaction.
    write_mutex: Mutex<()>,
    block_cache: BlockCache,
    row_cache: RowCache,
    rng: Mutex<ChaCha8Rng>,
    counters: Counters,
    instance: u64,
    file_seq: AtomicU64,
}

/// Full lookup attempts before conceding to version churn; the first two
/// may push down, the rest walk block-wise.
const GET_ATTEMPTS: u32 = 5;

/// Distinguishes table files when several stores share one extent store.
static STORE_SEQ: AtomicU64 = AtomicU64::new(0);

impl LsmStore {
    pub fn new(client: Arc<HostClient>, config: LsmConfig) -> Arc<LsmStore> {
        Arc::new(LsmStore {
            block_cache: BlockCache::new(config.block_cache_bytes),
            row_cache: RowCache::new(config.row_cache_entries),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.sampling_seed)),
            client,
            config,
            state: RwLock::new(State {
                mem: Memtable::new(),
                imm: None,
                levels: Arc::new(LevelSet::default()),
            }),
            write_mutex: Mutex::new(()),
            counters: Counters::default(),
            instance: STORE_SEQ.fetch_add(1, Ordering::Relaxed),
            file_seq: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &LsmConfig {
        &self.config
    }

    pub fn client(&self) -> &Arc<HostClient> {
        &self.client
    }

    pub fn block_cache(&self) -> &BlockCache {
        &self.block_cache
    }

    pub fn levels(&self) -> Arc<LevelSet> {
        self.state.read().levels.clone()
    }

    fn bump(&self, c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }

    fn absorb(&self, s: &RequestStats) {
        self.counters.round_trips.fetch_add(s.round_trips as u64, Ordering::Relaxed);
        self.counters.resubmissions.fetch_add(s.resubmissions as u64, Ordering::Relaxed);
        self.counters.device_reads.fetch_add(s.device_reads as u64, Ordering::Relaxed);
        self.counters.bytes_sent.fetch_add(s.bytes_sent, Ordering::Relaxed);
        self.counters.bytes_received.fetch_add(s.bytes_received, Ordering::Relaxed);
    }

    pub fn stats(&self) -> LsmStats {
        let c = &self.counters;
        let ld = |a: &AtomicU64| a.load(Ordering::Relaxed);
        LsmStats {
            puts: ld(&c.puts),
            deletes: ld(&c.deletes),
            gets: ld(&c.gets),
            memtable_hits: ld(&c.memtable_hits),
            row_cache_hits: ld(&c.row_cache_hits),
            local_answers: ld(&c.local_answers),
            sampling_decisions: ld(&c.sampling_decisions),
            sampled_reads: ld(&c.sampled_reads),
            pushdowns: ld(&c.pushdowns),
            pushdowns_completed: ld(&c.pushdowns_completed),
            target_fallbacks: ld(&c.target_fallbacks),
            wide_plan_fallbacks: ld(&c.wide_plan_fallbacks),
            churn_retries: ld(&c.churn_retries),
            flushes: ld(&c.flushes),
            compactions: ld(&c.compactions),
            round_trips: ld(&c.round_trips),
            resubmissions: ld(&c.resubmissions),
            device_reads: ld(&c.device_reads),
            bytes_sent: ld(&c.bytes_sent),
            bytes_received: ld(&c.bytes_received),
            block_cache_hits: self.block_cache.hits(),
            block_cache_misses: self.block_cache.misses(),
            block_cache_bytes: self.block_cache.bytes() as u64,
            row_cache_len: self.row_cache.len() as u64,
        }
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let levels = self.levels();
        let mut out = Vec::new();
        for (level, tables) in levels.levels.iter().enumerate() {
            for t in tables {
                out.push(ManifestEntry {
                    level,
                    inode: t.inode,
                    n_entries: t.n_entries,
                    min_key: t.min_key,
                    max_key: t.max_key,
                    file_bytes: t.file_len,
                });
            }
        }
        out
    }

    fn sst_opts(&self) -> SstWriteOpts {
        SstWriteOpts {
            block_bytes: self.config.data_block_bytes,
            bloom_bits_per_key: self.config.bloom_bits_per_key,
            pin_index: self.config.pin_index,
        }
    }

    fn next_name(&self) -> String {
        format!(
            "lsm{}-{:06}",
            self.instance,
            self.file_seq.fetch_add(1, Ordering::Relaxed)
        )
    }

    fn publish(&self) -> Result<(), LsmError> {
        if self.config.sync_on_publish {
            self.client.sync().drain_until_clean(64)?;
        } else {
            self.client.sync().kick();
        }
        Ok(())
    }

    // ------------------------------------------------------------- writes

    pub fn put(&self, key: u64, value: &[u8]) -> Result<(), LsmError> {
        if value.len() > self.config.max_value_bytes {
            return Err(LsmError::ValueTooLarge);
        }
        self.bump(&self.counters.puts);
        self.write(key, Some(value.to_vec()))
    }

    pub fn delete(&self, key: u64) -> Result<(), LsmError> {
        self.bump(&self.counters.deletes);
        self.write(key, None)
    }

    fn write(&self, key: u64, value: Option<Vec<u8>>) -> Result<(), LsmError> {
        let _w = self.write_mutex.lock();
        self.state.write().mem.insert(key, value);
        self.row_cache.invalidate(key);
        if self.state.read().mem.bytes() >= self.config.memtable_bytes {
            self.flush_locked()?;
            self.compact_locked()?;
        }
        Ok(())
    }

    /// Force the memtable out and run any due compactions.
    pub fn flush(&self) -> Result<(), LsmError> {
        let _w = self.write_mutex.lock();
        self.flush_locked()?;
        self.compact_locked()
    }

    fn flush_locked(&self) -> Result<(), LsmError> {
        let imm = {
            let mut st = self.state.write();
            if st.mem.is_empty() {
                return Ok(());
            }
            let imm = Arc::new(std::mem::take(&mut st.mem));
            st.imm = Some(imm.clone());
            imm
        };
        let name = self.next_name();
        let table =
            compact::flush_memtable(self.client.store(), &imm, &name, &self.sst_opts())?;
        {
            let mut st = self.state.write();
            let mut ls = (*st.levels).clone();
            if ls.levels.is_empty() {
                ls.levels.push(Vec::new());
            }
            ls.levels[0].insert(0, table);
            st.levels = Arc::new(ls);
            st.imm = None;
        }
        self.bump(&self.counters.flushes);
        self.publish()
    }

    fn level_threshold(&self, level: usize) -> u64 {
        self.config.l1_bytes * self.config.level_ratio.pow(level as u32 - 1)
    }

    fn compact_locked(&self) -> Result<(), LsmError> {
        loop {
            let levels = self.levels();
            let upper = if levels.level(0).len() >= self.config.l0_trigger {
                0
            } else {
                let due = (1..levels.levels.len()).find(|&i| {
                    !levels.level(i).is_empty()
                        && levels.level_bytes(i) > self.level_threshold(i)
                });
                match due {
                    Some(i) => i,
                    None => return Ok(()),
                }
            };
            let newer = levels.level(upper).to_vec();
            let older = levels.level(upper + 1).to_vec();
            let drop_tombstones = levels.all_empty_below(upper + 1);
            let store = self.client.store();
            let merged = compact::merge_tables(
                store,
                &newer,
                &older,
                drop_tombstones,
                self.config.file_bytes,
                &self.sst_opts(),
                || self.next_name(),
            )?;
            {
                let mut st = self.state.write();
                let mut ls = (*st.levels).clone();
                while ls.levels.len() <= upper + 1 {
                    ls.levels.push(Vec::new());
                }
                ls.levels[upper].clear();
                ls.levels[upper + 1] = merged;
                st.levels = Arc::new(ls);
            }
            self.bump(&self.counters.compactions);
            self.publish()?;
            for t in newer.iter().chain(older.iter()) {
                let _ = store.delete_file(t.inode);
                self.block_cache.purge_inode(t.inode);
            }
        }
    }

    // -------------------------------------------------------------- reads

    /// Plan a lookup without executing it (current snapshot).
    pub fn plan_for(&self, key: u64) -> Result<QueryPlan, LsmError> {
        let levels = self.levels();
        build_plan(&levels.candidates(key), key, &self.block_cache)
    }

    pub fn get(&self, key: u64) -> Result<Option<Vec<u8>>, LsmError> {
        self.bump(&self.counters.gets);
        {
            let st = self.state.read();
            if let Some(hit) = st.mem.get(key) {
                self.bump(&self.counters.memtable_hits);
                return Ok(hit);
            }
            if let Some(imm) = &st.imm {
                if let Some(hit) = imm.get(key) {
                    self.bump(&self.counters.memtable_hits);
                    return Ok(hit);
                }
            }
        }
        if let Some(hit) = self.row_cache.get(key) {
            self.bump(&self.counters.row_cache_hits);
            return Ok(hit.map(|v| (*v).clone()));
        }

        let mut decided = false;
        let mut sampled = false;
        for attempt in 0..GET_ATTEMPTS {
            let levels = self.levels();
            let plan = build_plan(&levels.candidates(key), key, &self.block_cache)?;
            if let Some(answer) = plan.local_answer() {
                self.bump(&self.counters.local_answers);
                self.finish(key, &answer);
                return Ok(answer);
            }
            if !decided && self.config.mode == Mode::Pushdown {
                decided = true;
                self.bump(&self.counters.sampling_decisions);
                sampled = self.rng.lock().random::<f64>() < self.config.sampling_rate;
            }
            let blockwise = self.config.mode == Mode::Baseline || sampled || attempt >= 2;
            let outcome = if blockwise {
                self.resolve_blockwise(&plan, key)
            } else {
                self.resolve_pushdown(&plan, key)
            };
            match outcome {
                Ok(answer) => {
                    if sampled {
                        self.bump(&self.counters.sampled_reads);
                    }
                    self.finish(key, &answer);
                    return Ok(answer);
                }
                Err(LsmError::VersionChurn) => {
                    // A flush/compaction/remap moved a file mid-lookup. Let
                    // the metadata catch up, then re-plan from scratch.
                    self.bump(&self.counters.churn_retries);
                    let _ = self.client.sync().drain_until_clean(16);
                    continue;
                }
                Err(e) => return Err(e),
            }
        }
        Err(LsmError::VersionChurn)
    }

    fn finish(&self, key: u64, answer: &Option<Vec<u8>>) {
        if self.config.cache_policy == CachePolicy::InsertFinal {
            self.row_cache.insert(key, answer.clone().map(Arc::new));
        }
    }

    /// One chained request covering the whole plan.
    fn resolve_pushdown(&self, plan: &QueryPlan, key: u64) -> Result<Option<Vec<u8>>, LsmError> {
        if plan.probes.len() > MAX_PUSHDOWN_FDS {
            self.bump(&self.counters.wide_plan_fallbacks);
            return self.resolve_blockwise(plan, key);
        }
        let fds: Vec<u64> = plan.probes.iter().map(|p| p.table.inode).collect();
        let entries: Vec<PlanEntry> = plan
            .probes
            .iter()
            .enumerate()
            .map(|(i, p)| PlanEntry {
                fd_index: i as u8,
                start_stage: p.stage,
                offset: p.offset,
                length: p.length,
            })
            .collect();
        let mut scratch =
            chain_scratch(&key_bytes(key), &entries, self.config.max_value_bytes);
        let (fd0, offset, length) = initial_read(&entries);
        self.bump(&self.counters.pushdowns);
        let reply =
            self.client
                .read_pushdown(&fds, fd0, offset, length, FN_SST_CHAIN, &mut scratch);
        self.absorb(&reply.stats);
        match reply.status {
            PushdownStatus::Completed => {
                self.bump(&self.counters.pushdowns_completed);
                match parse_chain_result(&scratch)
                    .ok_or(LsmError::Corrupt("chain result"))?
                {
                    ChainResult::Found(v) => Ok(Some(v)),
                    ChainResult::Tombstone => Ok(None),
                    ChainResult::Exhausted => Ok(plan.backstop.clone().unwrap_or(None)),
                }
            }
            PushdownStatus::TargetFallback => {
                self.bump(&self.counters.target_fallbacks);
                self.resolve_blockwise(plan, key)
            }
            PushdownStatus::Aborted(reason) => match reason {
                AbortReason::PreCheckVersion
                | AbortReason::PostCheckVersion
                | AbortReason::TargetVersion
                | AbortReason::Invalid => Err(LsmError::VersionChurn),
                other => Err(LsmError::ReadFailed(other)),
            },
        }
    }

    /// Walk the plan block by block from the host (baseline mode, sampled
    /// reads, and fallbacks).
    fn resolve_blockwise(&self, plan: &QueryPlan, key: u64) -> Result<Option<Vec<u8>>, LsmError> {
        let kb = key_bytes(key);
        for probe in &plan.probes {
            let handle = if probe.stage == STAGE_INDEX {
                let index = self.fetch_block(&probe.table, probe.offset, probe.length)?;
                match index_seek(&index, &kb)? {
                    Some(h) => h,
                    None => continue,
                }
            } else {
                pushdown_core::formats::sst::BlockHandle {
                    offset: probe.offset,
                    length: probe.length,
                }
            };
            let block = self.fetch_block(&probe.table, handle.offset, handle.length)?;
            match block_find(&block, &kb)? {
                EntrySearch::Value(v) => return Ok(Some(v)),
                EntrySearch::Tombstone => return Ok(None),
                EntrySearch::Absent => continue,
            }
        }
        Ok(plan.backstop.clone().unwrap_or(None))
    }

    fn fetch_block(
        &self,
        table: &SstTable,
        offset: u64,
        length: u32,
    ) -> Result<Arc<Vec<u8>>, LsmError> {
        if let Some(hit) = self.block_cache.get(table.inode, offset) {
            return Ok(hit);
        }
        let reply = self.client.read_remote(table.inode, offset, length as u64);
        self.absorb(&reply.stats);
        match reply.data {
            Some(data) => {
                let block = Arc::new(data);
                if self.config.cache_policy == CachePolicy::InsertFinal {
                    self.block_cache.insert(table.inode, offset, block.clone());
                }
                Ok(block)
            }
            None => Err(match reply.abort {
                Some(AbortReason::TargetIo) => LsmError::ReadFailed(AbortReason::TargetIo),
                Some(AbortReason::LimitExceeded) => {
                    LsmError::ReadFailed(AbortReason::LimitExceeded)
                }
                _ => LsmError::VersionChurn,
            }),
        }
    }
}
