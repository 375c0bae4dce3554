//! Benchmark orchestration: build a host/target rig, load a store, replay
//! an op stream across worker threads, and fold the counters into a
//! [`Report`].
//!
//! Two deployments exist. `InProc` wires host and target through the
//! loopback rig — every request still runs the full wire codec, only the
//! socket is elided. `Tcp` connects to an external target process; host
//! and target share one backing image file (the host writes blocks
//! directly, the analog of the write path this protocol does not model,
//! while reads and pushdowns travel the wire).
//!
//! Determinism: with one worker thread, a given spec/seed produces an
//! identical op stream, identical per-op results, and an identical result
//! digest in both modes. With several threads the stream is partitioned
//! round-robin and reads that race writes may legitimately observe either
//! version, so digests are only comparable for read-only workloads.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use pushdown_core::block::{BlockDevice, DeviceError};
use pushdown_core::host::{DataTransport, HostClient, TransportError, WireCost};
use pushdown_core::loopback::{Loopback, LoopbackOptions};
use pushdown_core::net::{TcpDataTransport, TcpSyncTransport};
use pushdown_core::store::{ExtentStore, StoreConfig, StoreError};
use pushdown_core::sync::{SyncDaemon, SyncError, Synchronizer};
use pushdown_core::wire::Message;
use pushdown_kv::btree::{
    build, solve_shape, BTreeStore, BtreeError, OpStats, NODE_SIZE, VALUE_LEN,
};
use pushdown_kv::lsm::{LsmConfig, LsmError, LsmStats, LsmStore};
use pushdown_kv::Mode;

use crate::metrics::{summarize_latencies, Digest, Report};
use crate::workload::{generate, value_bytes, Op, OpKind, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("setup: {0}")]
    Setup(String),
    #[error("{0} is read-only; the workload contains writes")]
    ReadOnlySystem(&'static str),
    #[error(transparent)]
    Lsm(#[from] LsmError),
    #[error(transparent)]
    Btree(#[from] BtreeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("sync: {0}")]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemKind {
    LsmKv,
    Btree,
}

impl SystemKind {
    pub fn parse(s: &str) -> Option<SystemKind> {
        match s {
            "lsmkv" => Some(SystemKind::LsmKv),
            "btree" => Some(SystemKind::Btree),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::LsmKv => "lsmkv",
            SystemKind::Btree => "btree",
        }
    }
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Baseline => "baseline",
        Mode::Pushdown => "pushdown",
    }
}

#[derive(Clone, Debug)]
pub enum Deployment {
    InProc {
        /// Probability that an allocation is deliberately split; exercises
        /// multi-extent layouts.
        fragment_probability: f64,
    },
    /// External target process. `backing` must be the same image file the
    /// target serves, reachable from this process.
    Tcp {
        data_addr: String,
        sync_addr: String,
        backing: PathBuf,
        block_size: u32,
    },
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub spec: WorkloadSpec,
    pub system: SystemKind,
    pub mode: Mode,
    /// Block-cache budget. Zero disables both the block and row caches for
    /// the LSM store; for the B⁺-tree store it selects how many top levels
    /// the client pins.
    pub cache_bytes: u64,
    pub sampling_rate: f64,
    pub threads: usize,
    /// Data-path TCP connections (ignored in-process).
    pub connections: usize,
    /// Ship extent-map changes from a background thread instead of inside
    /// each publish. Realistic, and the source of version-mismatch aborts;
    /// leave off for strictly deterministic counters.
    pub background_sync: bool,
    /// Node-level count for the B⁺-tree system; None picks the smallest
    /// feasible height.
    pub tree_levels: Option<u32>,
    pub deployment: Deployment,
    /// LSM tuning template; the mode/cache/sampling fields above override
    /// the corresponding template fields.
    pub lsm: LsmConfig,
    /// Report label when the ops did not come from a stock mix.
    pub workload_label: Option<String>,
}

impl BenchConfig {
    pub fn new(spec: WorkloadSpec, system: SystemKind, mode: Mode) -> BenchConfig {
        BenchConfig {
            spec,
            system,
            mode,
            cache_bytes: 8 << 20,
            sampling_rate: 0.01,
            threads: 1,
            connections: 1,
            background_sync: false,
            tree_levels: None,
            deployment: Deployment::InProc { fragment_probability: 0.0 },
            lsm: LsmConfig::default(),
            workload_label: None,
        }
    }
}

struct Rig {
    store: Arc<ExtentStore>,
    sync: Arc<Synchronizer>,
    client: Arc<HostClient>,
    _daemon: Option<SyncDaemon>,
    _loopback: Option<Loopback>,
}

/// Round-robin over several TCP connections so concurrent workers are not
/// serialized on one stream.
struct PooledTransport {
    pool: Vec<TcpDataTransport>,
    next: AtomicUsize,
}

impl DataTransport for PooledTransport {
    fn roundtrip(&self, msg: &Message) -> Result<(Message, WireCost), TransportError> {
        let i = self.next.fetch_add(1, Ordering::Relaxed) % self.pool.len();
        self.pool[i].roundtrip(msg)
    }
}

/// Size the in-memory device: live rows, compaction transients, and not-yet
/// -deleted inputs all coexist briefly.
fn capacity_blocks_for(spec: &WorkloadSpec, block_size: u32) -> u64 {
    let rows = spec.n_keys + spec.n_ops + 1;
    let bytes = rows.saturating_mul(spec.value_size as u64 + 32) * 6 + (16 << 20);
    (bytes / block_size as u64 + 1).next_power_of_two()
}

fn build_rig(cfg: &BenchConfig) -> Result<Rig, BenchError> {
    match &cfg.deployment {
        Deployment::InProc { fragment_probability } => {
            let lb = Loopback::new(LoopbackOptions {
                capacity_blocks: capacity_blocks_for(&cfg.spec, 512),
                fragment_probability: *fragment_probability,
                fragment_seed: cfg.spec.seed,
                spawn_drainer: cfg.background_sync,
                ..LoopbackOptions::default()
            });
            Ok(Rig {
                store: lb.store.clone(),
                sync: lb.sync.clone(),
                client: lb.client.clone(),
                _daemon: None,
                _loopback: Some(lb),
            })
        }
        Deployment::Tcp { data_addr, sync_addr, backing, block_size } => {
            let len = std::fs::metadata(backing)
                .map_err(|e| {
                    BenchError::Setup(format!("backing file {}: {e}", backing.display()))
                })?
                .len();
            let blocks = len / *block_size as u64;
            if blocks == 0 {
                return Err(BenchError::Setup(format!(
                    "backing file {} smaller than one block",
                    backing.display()
                )));
            }
            let device = Arc::new(BlockDevice::file(backing, *block_size, blocks)?);
            let store = ExtentStore::new(device, StoreConfig::default());
            let sync = Synchronizer::new(
                store.clone(),
                Box::new(TcpSyncTransport::connect(sync_addr)?),
            );
            let transport: Box<dyn DataTransport> = if cfg.connections <= 1 {
                Box::new(TcpDataTransport::connect(data_addr)?)
            } else {
                let mut pool = Vec::with_capacity(cfg.connections);
                for _ in 0..cfg.connections {
                    pool.push(TcpDataTransport::connect(data_addr)?);
                }
                Box::new(PooledTransport { pool, next: AtomicUsize::new(0) })
            };
            let client = HostClient::new(store.clone(), sync.clone(), transport);
            let daemon = cfg
                .background_sync
                .then(|| SyncDaemon::spawn(sync.clone(), Duration::from_millis(1)));
            Ok(Rig { store, sync, client, _daemon: daemon, _loopback: None })
        }
    }
}

enum OpOutcome {
    Read(Option<Vec<u8>>),
    Wrote,
}

/// Replay `ops` through `op_fn`, round-robin across `threads` workers.
/// Returns the merged digest, per-op latencies (µs), and the absent-read
/// count.
fn execute_ops<F>(
    ops: &[Op],
    threads: usize,
    op_fn: F,
) -> Result<(Digest, Vec<u64>, u64), BenchError>
where
    F: Fn(u64, &Op) -> Result<OpOutcome, BenchError> + Sync,
{
    let run_slice = |start: usize| -> Result<(Digest, Vec<u64>, u64), BenchError> {
        let mut digest = Digest::default();
        let mut lats = Vec::with_capacity(ops.len() / threads + 1);
        let mut absent = 0u64;
        let mut i = start;
        while i < ops.len() {
            let op = &ops[i];
            let t = Instant::now();
            let out = op_fn(i as u64, op)?;
            lats.push(t.elapsed().as_micros() as u64);
            match out {
                OpOutcome::Read(v) => {
                    if v.is_none() {
                        absent += 1;
                    }
                    digest.fold_read(i as u64, op.key, v.as_deref());
                }
                OpOutcome::Wrote => digest.fold_write(i as u64, op.key),
            }
            i += threads;
        }
        Ok((digest, lats, absent))
    };
    if threads == 1 {
        return run_slice(0);
    }
    std::thread::scope(|scope| {
        let workers: Vec<_> = (0..threads).map(|w| scope.spawn(move || run_slice(w))).collect();
        let mut digest = Digest::default();
        let mut lats = Vec::with_capacity(ops.len());
        let mut absent = 0u64;
        for w in workers {
            let (d, l, a) = w
                .join()
                .map_err(|_| BenchError::Setup("worker thread panicked".into()))??;
            digest.merge(d);
            lats.extend(l);
            absent += a;
        }
        Ok((digest, lats, absent))
    })
}

fn validate(cfg: &BenchConfig) -> Result<(), BenchError> {
    if cfg.threads == 0 {
        return Err(BenchError::Setup("threads must be at least 1".into()));
    }
    if cfg.connections == 0 {
        return Err(BenchError::Setup("connections must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.sampling_rate) {
        return Err(BenchError::Setup("sampling rate must be in [0, 1]".into()));
    }
    if cfg.system == SystemKind::LsmKv
        && (cfg.spec.value_size == 0 || cfg.spec.value_size > cfg.lsm.max_value_bytes)
    {
        return Err(BenchError::Setup(format!(
            "value size must be in 1..={}",
            cfg.lsm.max_value_bytes
        )));
    }
    Ok(())
}

/// Generate the configured workload's op stream and run it.
pub fn run(cfg: &BenchConfig) -> Result<Report, BenchError> {
    let ops = generate(&cfg.spec);
    run_ops(cfg, &ops)
}

/// Run a concrete op stream (trace replay enters here).
pub fn run_ops(cfg: &BenchConfig, ops: &[Op]) -> Result<Report, BenchError> {
    validate(cfg)?;
    match cfg.system {
        SystemKind::LsmKv => run_lsm(cfg, ops),
        SystemKind::Btree => run_btree(cfg, ops),
    }
}

/// Re-run the same workload at each sampling rate (pushdown mode), each on
/// a fresh cold store.
pub fn sweep_sampling(cfg: &BenchConfig, rates: &[f64]) -> Result<Vec<Report>, BenchError> {
    let ops = generate(&cfg.spec);
    rates
        .iter()
        .map(|&rate| {
            let mut c = cfg.clone();
            c.mode = Mode::Pushdown;
            c.sampling_rate = rate;
            run_ops(&c, &ops)
        })
        .collect()
}

fn base_report(cfg: &BenchConfig, ops: &[Op], elapsed: Duration) -> Report {
    let elapsed_s = elapsed.as_secs_f64();
    Report {
        schema_version: 1,
        system: cfg.system.name().into(),
        mode: mode_name(cfg.mode).into(),
        workload: cfg
            .workload_label
            .clone()
            .unwrap_or_else(|| cfg.spec.mix.name().into()),
        distribution: cfg.spec.distribution.name().into(),
        n_keys: cfg.spec.n_keys,
        n_ops: ops.len() as u64,
        value_size: cfg.spec.value_size as u32,
        seed: cfg.spec.seed,
        cache_bytes: cfg.cache_bytes,
        sampling_rate: cfg.sampling_rate,
        threads: cfg.threads,
        connections: cfg.connections,
        elapsed_s,
        throughput_ops_per_s: if elapsed_s > 0.0 {
            ops.len() as f64 / elapsed_s
        } else {
            0.0
        },
        latency_us: Default::default(),
        reads: 0,
        read_absent: 0,
        writes: 0,
        round_trips: 0,
        resubmissions: 0,
        device_reads: 0,
        bytes_sent: 0,
        bytes_received: 0,
        sampled_count: 0,
        mismatch_count: 0,
        fallback_count: 0,
        local_answers: 0,
        memtable_hits: 0,
        row_cache_hits: 0,
        cache_hits: 0,
        cache_misses: 0,
        cache_hit_rate: 0.0,
        result_digest: String::new(),
    }
}

fn run_lsm(cfg: &BenchConfig, ops: &[Op]) -> Result<Report, BenchError> {
    let rig = build_rig(cfg)?;
    let mut lc = cfg.lsm.clone();
    lc.mode = cfg.mode;
    lc.block_cache_bytes = cfg.cache_bytes as usize;
    if cfg.cache_bytes == 0 {
        lc.row_cache_entries = 0;
    }
    lc.sampling_rate = cfg.sampling_rate;
    lc.sampling_seed = cfg.spec.seed ^ 0x5a3c_9d1e;
    lc.sync_on_publish = !cfg.background_sync;
    let store = LsmStore::new(rig.client.clone(), lc);

    for key in 0..cfg.spec.n_keys {
        store.put(key, &value_bytes(key, 0, cfg.spec.value_size))?;
    }
    store.flush()?;
    rig.sync.drain_until_clean(256)?;

    let s0 = store.stats();
    let default_vs = cfg.spec.value_size;
    let t0 = Instant::now();
    let (digest, lats, absent) = execute_ops(ops, cfg.threads, |i, op| {
        let vs = if op.value_size == 0 { default_vs } else { op.value_size as usize };
        match op.kind {
            OpKind::Read => Ok(OpOutcome::Read(store.get(op.key)?)),
            OpKind::Update | OpKind::Insert => {
                store.put(op.key, &value_bytes(op.key, i + 1, vs))?;
                Ok(OpOutcome::Wrote)
            }
            OpKind::ReadModifyWrite => {
                let v = store.get(op.key)?;
                store.put(op.key, &value_bytes(op.key, i + 1, vs))?;
                Ok(OpOutcome::Read(v))
            }
        }
    })?;
    let elapsed = t0.elapsed();
    let s1 = store.stats();

    let d = |f: fn(&LsmStats) -> u64| f(&s1).saturating_sub(f(&s0));
    let mut r = base_report(cfg, ops, elapsed);
    r.reads = d(|s| s.gets);
    r.read_absent = absent;
    r.writes = d(|s| s.puts) + d(|s| s.deletes);
    r.round_trips = d(|s| s.round_trips);
    r.resubmissions = d(|s| s.resubmissions);
    r.device_reads = d(|s| s.device_reads);
    r.bytes_sent = d(|s| s.bytes_sent);
    r.bytes_received = d(|s| s.bytes_received);
    r.sampled_count = d(|s| s.sampled_reads);
    r.mismatch_count = d(|s| s.churn_retries);
    r.fallback_count = d(|s| s.target_fallbacks) + d(|s| s.wide_plan_fallbacks);
    r.local_answers = d(|s| s.local_answers);
    r.memtable_hits = d(|s| s.memtable_hits);
    r.row_cache_hits = d(|s| s.row_cache_hits);
    r.cache_hits = d(|s| s.block_cache_hits);
    r.cache_misses = d(|s| s.block_cache_misses);
    let probes = r.cache_hits + r.cache_misses;
    r.cache_hit_rate = if probes > 0 { r.cache_hits as f64 / probes as f64 } else { 0.0 };
    r.latency_us = summarize_latencies(lats);
    r.result_digest = digest.hex();
    Ok(r)
}

fn natural_levels(n_keys: u64) -> Result<u32, BenchError> {
    (1..=16u32)
        .find(|&l| solve_shape(n_keys, l).is_ok())
        .ok_or_else(|| BenchError::Setup(format!("no feasible tree shape for {n_keys} keys")))
}

/// How many top levels fit in the cache budget (root-first cumulative).
fn cached_levels_for(level_counts: &[u64], cache_bytes: u64) -> u32 {
    let mut cached = 0u32;
    let mut bytes = 0u64;
    for &count in level_counts {
        bytes += count * NODE_SIZE as u64;
        if bytes > cache_bytes {
            break;
        }
        cached += 1;
    }
    cached
}

fn run_btree(cfg: &BenchConfig, ops: &[Op]) -> Result<Report, BenchError> {
    if ops.iter().any(|o| o.kind != OpKind::Read) {
        return Err(BenchError::ReadOnlySystem("btree"));
    }
    if cfg.spec.n_keys == 0 {
        return Err(BenchError::Setup("btree needs at least one key".into()));
    }
    let rig = build_rig(cfg)?;
    let levels = match cfg.tree_levels {
        Some(l) => l,
        None => natural_levels(cfg.spec.n_keys)?,
    };
    let shape = solve_shape(cfg.spec.n_keys, levels)?;
    let keys: Vec<u64> = (0..cfg.spec.n_keys).collect();
    let inode = build(&rig.store, "bench-tree", &keys, levels, |k| {
        value_bytes(k, 0, VALUE_LEN)
    })?;
    rig.sync.drain_until_clean(256)?;
    let cached = cached_levels_for(&shape.level_counts, cfg.cache_bytes).min(levels);
    let store = BTreeStore::open(rig.client.clone(), inode, cached)?;

    let totals = Mutex::new(OpStats::default());
    let mode = cfg.mode;
    let t0 = Instant::now();
    let (digest, lats, absent) = execute_ops(ops, cfg.threads, |_, op| {
        let (v, st) = store.get_point(op.key, mode)?;
        totals.lock().unwrap().add(&st);
        Ok(OpOutcome::Read(v))
    })?;
    let elapsed = t0.elapsed();
    let st = totals.into_inner().unwrap();

    let mut r = base_report(cfg, ops, elapsed);
    r.value_size = VALUE_LEN as u32;
    r.reads = ops.len() as u64;
    r.read_absent = absent;
    r.round_trips = st.round_trips as u64;
    r.resubmissions = st.resubmissions as u64;
    r.device_reads = st.device_reads as u64;
    r.bytes_sent = st.bytes_sent;
    r.bytes_received = st.bytes_received;
    r.mismatch_count = st.aborts as u64;
    r.fallback_count = st.fallbacks as u64;
    r.latency_us = summarize_latencies(lats);
    r.result_digest = digest.hex();
    Ok(r)
}
