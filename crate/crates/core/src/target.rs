//! Target-side request engine.
//!
//! The engine owns the device, the replicated extent maps, and the function
//! registry. Every request carries the host's view of the relevant file
//! versions; the engine pins the matching replica snapshots up front and
//! answers `VersionMismatch` if any disagree, so a response can never mix
//! data from two layouts. Once pinned, the snapshots stay valid for the
//! whole request even if newer maps arrive concurrently.
//!
//! Pushdown execution loops: translate the requested span through the
//! pinned map, read it, hand it to the function, follow the resubmission.
//! A chain read that would span physically discontiguous extents is not
//! executed; the request returns `FunctionFallback` and the host redoes
//! that query through plain reads (which do assemble split spans).

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::block::BlockDevice;
use crate::extent::{ExtentMap, MapError};
use crate::functions::{StepOutcome, StorageFn};
use crate::sync::ReplicaStore;
use crate::wire::{
    Message, PushdownCapsule, PushdownResponse, ReadCapsule, ReadResponse, Status,
    MAX_SCRATCH_LEN,
};

#[derive(Clone, Copy, Debug)]
pub struct ExecutionLimits {
    /// Resubmissions allowed per pushdown (the initial read is free).
    pub max_resubmissions: u32,
    /// Largest single read, plain or resubmitted.
    pub max_read_length: u64,
    /// Function invocations allowed per pushdown.
    pub max_steps_per_call: u64,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        ExecutionLimits {
            max_resubmissions: 64,
            max_read_length: 1 << 20,
            max_steps_per_call: 1 << 20,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("function id {0} already registered")]
    Duplicate(u32),
}

#[derive(Default)]
pub struct FunctionRegistry {
    fns: RwLock<HashMap<u32, Arc<dyn StorageFn>>>,
}

impl FunctionRegistry {
    pub fn register(&self, id: u32, f: Arc<dyn StorageFn>) -> Result<(), RegistryError> {
        let mut fns = self.fns.write();
        if fns.contains_key(&id) {
            return Err(RegistryError::Duplicate(id));
        }
        fns.insert(id, f);
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<Arc<dyn StorageFn>> {
        self.fns.read().get(&id).cloned()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FnCounters {
    pub calls: u64,
    pub completed: u64,
    pub resubmissions: u64,
    pub device_reads: u64,
    pub fallbacks: u64,
    pub errors: u64,
}

/// Target-side counters; exact, updated per request.
#[derive(Default)]
pub struct TargetStats {
    pub plain_reads: AtomicU64,
    pub plain_bytes: AtomicU64,
    pub pushdowns: AtomicU64,
    pub version_mismatches: AtomicU64,
    pub io_errors: AtomicU64,
    pub limit_exceeded: AtomicU64,
    per_fn: Mutex<HashMap<u32, FnCounters>>,
}

#[derive(Clone, Debug, Default)]
pub struct TargetStatsSnapshot {
    pub plain_reads: u64,
    pub plain_bytes: u64,
    pub pushdowns: u64,
    pub version_mismatches: u64,
    pub io_errors: u64,
    pub limit_exceeded: u64,
    pub per_fn: Vec<(u32, FnCounters)>,
}

impl TargetStats {
    fn fn_counters(&self, id: u32, update: impl FnOnce(&mut FnCounters)) {
        let mut map = self.per_fn.lock();
        update(map.entry(id).or_default());
    }

    pub fn snapshot(&self) -> TargetStatsSnapshot {
        let mut per_fn: Vec<(u32, FnCounters)> = self
            .per_fn
            .lock()
            .iter()
            .map(|(&id, &c)| (id, c))
            .collect();
        per_fn.sort_by_key(|(id, _)| *id);
        TargetStatsSnapshot {
            plain_reads: self.plain_reads.load(Ordering::Relaxed),
            plain_bytes: self.plain_bytes.load(Ordering::Relaxed),
            pushdowns: self.pushdowns.load(Ordering::Relaxed),
            version_mismatches: self.version_mismatches.load(Ordering::Relaxed),
            io_errors: self.io_errors.load(Ordering::Relaxed),
            limit_exceeded: self.limit_exceeded.load(Ordering::Relaxed),
            per_fn,
        }
    }
}

impl std::fmt::Display for TargetStatsSnapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "plain_reads {}", self.plain_reads)?;
        writeln!(f, "plain_bytes {}", self.plain_bytes)?;
        writeln!(f, "pushdowns {}", self.pushdowns)?;
        writeln!(f, "version_mismatches {}", self.version_mismatches)?;
        writeln!(f, "io_errors {}", self.io_errors)?;
        writeln!(f, "limit_exceeded {}", self.limit_exceeded)?;
        for (id, c) in &self.per_fn {
            writeln!(
                f,
                "fn {id}: calls {} completed {} resubmissions {} device_reads {} fallbacks {} errors {}",
                c.calls, c.completed, c.resubmissions, c.device_reads, c.fallbacks, c.errors
            )?;
        }
        Ok(())
    }
}

enum SpanRead {
    Data(Vec<u8>),
    OutOfRange,
    /// The span crosses physically discontiguous extents.
    Split,
    Device,
}

pub struct TargetEngine {
    device: Arc<BlockDevice>,
    replicas: Arc<ReplicaStore>,
    registry: FunctionRegistry,
    limits: ExecutionLimits,
    stats: TargetStats,
}

impl TargetEngine {
    pub fn new(
        device: Arc<BlockDevice>,
        replicas: Arc<ReplicaStore>,
        limits: ExecutionLimits,
    ) -> Arc<Self> {
        Arc::new(TargetEngine {
            device,
            replicas,
            registry: FunctionRegistry::default(),
            limits,
            stats: TargetStats::default(),
        })
    }

    /// Engine with the three standard functions registered.
    pub fn with_standard_functions(
        device: Arc<BlockDevice>,
        replicas: Arc<ReplicaStore>,
        limits: ExecutionLimits,
    ) -> Arc<Self> {
        let engine = Self::new(device, replicas, limits);
        engine
            .register_function(
                crate::functions::FN_BTREE_LOOKUP,
                Arc::new(crate::functions::btree::BtreeLookupFn),
            )
            .unwrap();
        engine
            .register_function(
                crate::functions::FN_BTREE_RANGE,
                Arc::new(crate::functions::btree::BtreeRangeFn),
            )
            .unwrap();
        engine
            .register_function(
                crate::functions::FN_SST_CHAIN,
                Arc::new(crate::functions::sst::SstChainFn),
            )
            .unwrap();
        engine
    }

    pub fn register_function(&self, id: u32, f: Arc<dyn StorageFn>) -> Result<(), RegistryError> {
        self.registry.register(id, f)
    }

    pub fn replicas(&self) -> &Arc<ReplicaStore> {
        &self.replicas
    }

    pub fn device(&self) -> &Arc<BlockDevice> {
        &self.device
    }

    pub fn stats(&self) -> TargetStatsSnapshot {
        self.stats.snapshot()
    }

    /// Dispatch one request message. Returns `None` for messages that are
    /// not requests (a server should drop such a connection).
    pub fn handle(&self, msg: &Message) -> Option<Message> {
        match msg {
            Message::Read(m) => Some(Message::ReadResp(self.serve_read(m))),
            Message::Pushdown(m) => Some(Message::PushdownResp(self.execute_pushdown(m))),
            _ => None,
        }
    }

    /// Read `length` bytes at byte `offset`, translating through the pinned
    /// replica map. Handles arbitrary alignment and spans crossing extents.
    fn read_span(&self, map: &ExtentMap, offset: u64, length: u64) -> SpanRead {
        let bs = self.device.block_size() as u64;
        let Some(end) = offset.checked_add(length) else {
            return SpanRead::OutOfRange;
        };
        let start = offset - offset % bs;
        let end = end.div_ceil(bs) * bs;
        let ranges = match map.lookup(start, end - start, bs as u32) {
            Ok(r) => r,
            Err(MapError::OutOfRange { .. }) => return SpanRead::OutOfRange,
            Err(_) => return SpanRead::Device,
        };
        if ranges.len() > 1 {
            return SpanRead::Split;
        }
        let mut buf = Vec::with_capacity((end - start) as usize);
        for r in &ranges {
            match self.device.read_blocks(r.device_block, r.blocks) {
                Ok(b) => buf.extend_from_slice(&b),
                Err(_) => return SpanRead::Device,
            }
        }
        let skip = (offset - start) as usize;
        SpanRead::Data(buf[skip..skip + length as usize].to_vec())
    }

    /// Like `read_span` but assembles spans across discontiguous extents —
    /// the plain-read path has no single-extent restriction.
    fn read_span_multi(&self, map: &ExtentMap, offset: u64, length: u64) -> SpanRead {
        let bs = self.device.block_size() as u64;
        let Some(end) = offset.checked_add(length) else {
            return SpanRead::OutOfRange;
        };
        let start = offset - offset % bs;
        let end = end.div_ceil(bs) * bs;
        let ranges = match map.lookup(start, end - start, bs as u32) {
            Ok(r) => r,
            Err(MapError::OutOfRange { .. }) => return SpanRead::OutOfRange,
            Err(_) => return SpanRead::Device,
        };
        let mut buf = Vec::with_capacity((end - start) as usize);
        for r in &ranges {
            match self.device.read_blocks(r.device_block, r.blocks) {
                Ok(b) => buf.extend_from_slice(&b),
                Err(_) => return SpanRead::Device,
            }
        }
        let skip = (offset - start) as usize;
        SpanRead::Data(buf[skip..skip + length as usize].to_vec())
    }

    pub fn serve_read(&self, req: &ReadCapsule) -> ReadResponse {
        let fail = |status: Status| ReadResponse {
            request_id: req.request_id,
            status,
            data: Vec::new(),
        };
        let Some(map) = self.replicas.get(req.inode) else {
            self.stats.version_mismatches.fetch_add(1, Ordering::Relaxed);
            return fail(Status::VersionMismatch);
        };
        if map.version != req.expected_version {
            self.stats.version_mismatches.fetch_add(1, Ordering::Relaxed);
            return fail(Status::VersionMismatch);
        }
        if req.length > self.limits.max_read_length {
            self.stats.limit_exceeded.fetch_add(1, Ordering::Relaxed);
            return fail(Status::LimitExceeded);
        }
        match self.read_span_multi(&map, req.offset, req.length) {
            SpanRead::Data(data) => {
                self.stats.plain_reads.fetch_add(1, Ordering::Relaxed);
                self.stats
                    .plain_bytes
                    .fetch_add(data.len() as u64, Ordering::Relaxed);
                ReadResponse {
                    request_id: req.request_id,
                    status: Status::Ok,
                    data,
                }
            }
            _ => {
                self.stats.io_errors.fetch_add(1, Ordering::Relaxed);
                fail(Status::IoError)
            }
        }
    }

    pub fn execute_pushdown(&self, req: &PushdownCapsule) -> PushdownResponse {
        self.stats.pushdowns.fetch_add(1, Ordering::Relaxed);
        let respond = |status: Status, resubmissions: u32, device_reads: u32| PushdownResponse {
            request_id: req.request_id,
            status,
            resubmissions,
            device_reads,
            scratch: None,
        };

        // Pin a snapshot per fd; all versions must match the host's view.
        let mut pinned: Vec<Arc<ExtentMap>> = Vec::with_capacity(req.fds.len());
        for fd in &req.fds {
            match self.replicas.get(fd.inode) {
                Some(map) if map.version == fd.version => pinned.push(map),
                _ => {
                    self.stats.version_mismatches.fetch_add(1, Ordering::Relaxed);
                    return respond(Status::VersionMismatch, 0, 0);
                }
            }
        }
        let Some(function) = self.registry.get(req.function_id) else {
            return respond(Status::FunctionError, 0, 0);
        };
        if req.scratch.is_empty() || req.scratch.len() > MAX_SCRATCH_LEN {
            return respond(Status::FunctionError, 0, 0);
        }
        self.stats.fn_counters(req.function_id, |c| c.calls += 1);

        let mut scratch = req.scratch.clone();
        let mut fd_index = req.initial_fd;
        let mut offset = req.offset;
        let mut length = req.length;
        let mut resubmissions = 0u32;
        let mut device_reads = 0u32;
        let mut steps = 0u64;
        loop {
            if length == 0 || fd_index as usize >= pinned.len() {
                self.stats.fn_counters(req.function_id, |c| c.errors += 1);
                return respond(Status::FunctionError, resubmissions, device_reads);
            }
            if length > self.limits.max_read_length {
                self.stats.limit_exceeded.fetch_add(1, Ordering::Relaxed);
                return respond(Status::LimitExceeded, resubmissions, device_reads);
            }
            let block = match self.read_span(&pinned[fd_index as usize], offset, length) {
                SpanRead::Data(b) => b,
                SpanRead::Split => {
                    self.stats.fn_counters(req.function_id, |c| c.fallbacks += 1);
                    return respond(Status::FunctionFallback, resubmissions, device_reads);
                }
                SpanRead::OutOfRange | SpanRead::Device => {
                    self.stats.io_errors.fetch_add(1, Ordering::Relaxed);
                    return respond(Status::IoError, resubmissions, device_reads);
                }
            };
            device_reads += 1;
            self.stats.fn_counters(req.function_id, |c| c.device_reads += 1);
            steps += 1;
            if steps > self.limits.max_steps_per_call {
                self.stats.limit_exceeded.fetch_add(1, Ordering::Relaxed);
                return respond(Status::LimitExceeded, resubmissions, device_reads);
            }
            let outcome = match catch_unwind(AssertUnwindSafe(|| {
                function.step(&block, &mut scratch)
            })) {
                Ok(o) => o,
                Err(_) => {
                    self.stats.fn_counters(req.function_id, |c| c.errors += 1);
                    return respond(Status::FunctionError, resubmissions, device_reads);
                }
            };
            match outcome {
                StepOutcome::Resubmit {
                    fd_index: fd,
                    offset: off,
                    length: len,
                } => {
                    if resubmissions == self.limits.max_resubmissions {
                        self.stats.limit_exceeded.fetch_add(1, Ordering::Relaxed);
                        return respond(Status::LimitExceeded, resubmissions, device_reads);
                    }
                    resubmissions += 1;
                    self.stats.fn_counters(req.function_id, |c| c.resubmissions += 1);
                    fd_index = fd;
                    offset = off;
                    length = len;
                }
                StepOutcome::Done { result_len } => {
                    if result_len as usize > scratch.len() {
                        self.stats.fn_counters(req.function_id, |c| c.errors += 1);
                        return respond(Status::FunctionError, resubmissions, device_reads);
                    }
                    scratch.truncate(result_len as usize);
                    self.stats.fn_counters(req.function_id, |c| c.completed += 1);
                    return PushdownResponse {
                        request_id: req.request_id,
                        status: Status::Ok,
                        resubmissions,
                        device_reads,
                        scratch: Some(scratch),
                    };
                }
                StepOutcome::Fallback { .. } => {
                    self.stats.fn_counters(req.function_id, |c| c.fallbacks += 1);
                    return respond(Status::FunctionFallback, resubmissions, device_reads);
                }
            }
        }
    }
}
