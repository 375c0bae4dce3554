//! Host-side client for the remote-read protocol.
//!
//! The client owns nothing but references: the extent store (source of
//! truth for versions), the synchronizer (to learn which versions the
//! target has acknowledged), and a transport. Every remote operation is
//! bracketed by version checks:
//!
//! * **Pre-submit** — the version the target holds (last acked) must equal
//!   the file's current version. If the file changed since the last sync
//!   round, submitting would only earn a mismatch; fail fast and kick the
//!   sync thread instead.
//! * **Post-complete** — after the response arrives, the file must *still*
//!   be at the version the request was built against. A concurrent remap
//!   may have freed and reused the very blocks the target read, so a
//!   response that raced a map change is discarded: plain reads drop the
//!   data, pushdowns zero the caller's scratch so no stale byte survives.
//!
//! The target performs the same version comparison on its end; the host
//! checks are what make the *response* trustworthy, not just the request.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::store::{ExtentStore, StoreError};
use crate::sync::Synchronizer;
use crate::wire::{
    FdVersion, Message, PushdownCapsule, ReadCapsule, Status, WireError, MAX_SCRATCH_LEN,
};

/// Exact frame sizes for one request/response exchange.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WireCost {
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("transport: {0}")]
    Wire(#[from] WireError),
    #[error("transport closed")]
    Closed,
    #[error("response id {got} does not match request id {want}")]
    IdMismatch { want: u64, got: u64 },
}

/// One request out, one response back.
pub trait DataTransport: Send + Sync {
    fn roundtrip(&self, msg: &Message) -> Result<(Message, WireCost), TransportError>;
}

/// In-process transport: frames through the real codec, hands the bytes to
/// a target engine directly. Costs are the exact frame lengths, so in-proc
/// byte accounting matches TCP byte accounting.
pub struct InProcTransport {
    engine: Arc<crate::target::TargetEngine>,
    /// Test hook, runs between encode and decode of the request.
    pub before_dispatch: parking_lot::Mutex<Option<Box<dyn FnMut() + Send>>>,
}

impl InProcTransport {
    pub fn new(engine: Arc<crate::target::TargetEngine>) -> Self {
        InProcTransport { engine, before_dispatch: parking_lot::Mutex::new(None) }
    }
}

impl DataTransport for InProcTransport {
    fn roundtrip(&self, msg: &Message) -> Result<(Message, WireCost), TransportError> {
        let frame = crate::wire::encode_frame(msg)?;
        let bytes_sent = frame.len() as u64;
        if let Some(hook) = self.before_dispatch.lock().as_mut() {
            hook();
        }
        let (decoded, _) = crate::wire::decode_frame(&frame)?;
        let resp = self.engine.handle(&decoded).ok_or(TransportError::Closed)?;
        let resp_frame = crate::wire::encode_frame(&resp)?;
        let bytes_received = resp_frame.len() as u64;
        let (resp, _) = crate::wire::decode_frame(&resp_frame)?;
        Ok((resp, WireCost { bytes_sent, bytes_received }))
    }
}

/// Why a remote operation did not produce a result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbortReason {
    /// Local map is ahead of what the target has acknowledged.
    PreCheckVersion,
    /// Map changed while the request was in flight; response discarded.
    PostCheckVersion,
    /// Target rejected the request's version outright.
    TargetVersion,
    Transport,
    FunctionError,
    LimitExceeded,
    TargetIo,
    /// Request was malformed before it left the host.
    Invalid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PushdownStatus {
    /// Function finished; caller scratch holds the result.
    Completed,
    /// Target declined (split extents, unparseable data); caller scratch
    /// is untouched and the query should be redone with plain reads.
    TargetFallback,
    Aborted(AbortReason),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RequestStats {
    pub round_trips: u32,
    pub resubmissions: u32,
    pub device_reads: u32,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl RequestStats {
    pub fn absorb(&mut self, other: &RequestStats) {
        self.round_trips += other.round_trips;
        self.resubmissions += other.resubmissions;
        self.device_reads += other.device_reads;
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
    }
}

#[derive(Debug)]
pub struct PushdownReply {
    pub status: PushdownStatus,
    pub stats: RequestStats,
}

#[derive(Debug)]
pub struct ReadReply {
    pub data: Option<Vec<u8>>,
    pub abort: Option<AbortReason>,
    pub stats: RequestStats,
}

/// Running totals across a client's lifetime.
#[derive(Default)]
pub struct ClientCounters {
    pub reads: AtomicU64,
    pub pushdowns: AtomicU64,
    pub pushdowns_completed: AtomicU64,
    pub fallbacks: AtomicU64,
    pub pre_aborts: AtomicU64,
    pub post_aborts: AtomicU64,
    pub target_version_rejects: AtomicU64,
    pub round_trips: AtomicU64,
    pub bytes_sent: AtomicU64,
    pub bytes_received: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClientCountersSnapshot {
    pub reads: u64,
    pub pushdowns: u64,
    pub pushdowns_completed: u64,
    pub fallbacks: u64,
    pub pre_aborts: u64,
    pub post_aborts: u64,
    pub target_version_rejects: u64,
    pub round_trips: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl ClientCounters {
    fn snapshot(&self) -> ClientCountersSnapshot {
        ClientCountersSnapshot {
            reads: self.reads.load(Ordering::Relaxed),
            pushdowns: self.pushdowns.load(Ordering::Relaxed),
            pushdowns_completed: self.pushdowns_completed.load(Ordering::Relaxed),
            fallbacks: self.fallbacks.load(Ordering::Relaxed),
            pre_aborts: self.pre_aborts.load(Ordering::Relaxed),
            post_aborts: self.post_aborts.load(Ordering::Relaxed),
            target_version_rejects: self.target_version_rejects.load(Ordering::Relaxed),
            round_trips: self.round_trips.load(Ordering::Relaxed),
            bytes_sent: self.bytes_sent.load(Ordering::Relaxed),
            bytes_received: self.bytes_received.load(Ordering::Relaxed),
        }
    }
}

pub struct HostClient {
    store: Arc<ExtentStore>,
    sync: Arc<Synchronizer>,
    transport: Box<dyn DataTransport>,
    next_id: AtomicU64,
    counters: ClientCounters,
    /// Attempts per plain read before giving up on version churn.
    pub read_retries: u32,
    /// How long to wait for the sync daemon to catch up between retries.
    pub retry_wait: Duration,
}

impl HostClient {
    pub fn new(
        store: Arc<ExtentStore>,
        sync: Arc<Synchronizer>,
        transport: Box<dyn DataTransport>,
    ) -> Arc<Self> {
        Arc::new(HostClient {
            store,
            sync,
            transport,
            next_id: AtomicU64::new(1),
            counters: ClientCounters::default(),
            read_retries: 3,
            retry_wait: Duration::from_millis(50),
        })
    }

    pub fn store(&self) -> &Arc<ExtentStore> {
        &self.store
    }

    pub fn sync(&self) -> &Arc<Synchronizer> {
        &self.sync
    }

    pub fn counters(&self) -> ClientCountersSnapshot {
        self.counters.snapshot()
    }

    fn id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// The version the target is known to hold for `inode`, provided the
    /// file has not moved past it locally. `None` = not safe to submit.
    fn submittable_version(&self, inode: u64) -> Option<u64> {
        let current = self.store.current_version(inode).ok()?;
        let acked = self.sync.sent_version(inode)?;
        (acked == current).then_some(current)
    }

    /// Plain remote read with retry on version churn. Returns the data, or
    /// the reason the last attempt was abandoned.
    pub fn read_remote(&self, inode: u64, offset: u64, length: u64) -> ReadReply {
        self.counters.reads.fetch_add(1, Ordering::Relaxed);
        let mut stats = RequestStats::default();
        let mut abort = AbortReason::PreCheckVersion;
        for attempt in 0..=self.read_retries {
            if attempt > 0 {
                self.sync.kick();
                let goal = match self.store.current_version(inode) {
                    Ok(v) => v,
                    Err(_) => {
                        return ReadReply { data: None, abort: Some(AbortReason::Invalid), stats }
                    }
                };
                let _ = self.sync.wait_for_version(inode, goal, self.retry_wait);
            }
            let Some(version) = self.submittable_version(inode) else {
                self.counters.pre_aborts.fetch_add(1, Ordering::Relaxed);
                abort = AbortReason::PreCheckVersion;
                continue;
            };
            let req = Message::Read(ReadCapsule {
                request_id: self.id(),
                inode,
                expected_version: version,
                offset,
                length,
            });
            let (resp, cost) = match self.transport.roundtrip(&req) {
                Ok(x) => x,
                Err(_) => {
                    abort = AbortReason::Transport;
                    continue;
                }
            };
            stats.round_trips += 1;
            stats.bytes_sent += cost.bytes_sent;
            stats.bytes_received += cost.bytes_received;
            self.counters.round_trips.fetch_add(1, Ordering::Relaxed);
            self.counters.bytes_sent.fetch_add(cost.bytes_sent, Ordering::Relaxed);
            self.counters
                .bytes_received
                .fetch_add(cost.bytes_received, Ordering::Relaxed);
            let Message::ReadResp(resp) = resp else {
                abort = AbortReason::Transport;
                continue;
            };
            match resp.status {
                Status::Ok => {
                    // Post-check: discard data read under a map that moved.
                    if self.store.current_version(inode).ok() != Some(version) {
                        self.counters.post_aborts.fetch_add(1, Ordering::Relaxed);
                        abort = AbortReason::PostCheckVersion;
                        continue;
                    }
                    return ReadReply { data: Some(resp.data), abort: None, stats };
                }
                Status::VersionMismatch => {
                    self.counters
                        .target_version_rejects
                        .fetch_add(1, Ordering::Relaxed);
                    abort = AbortReason::TargetVersion;
                    continue;
                }
                Status::IoError => {
                    return ReadReply { data: None, abort: Some(AbortReason::TargetIo), stats }
                }
                Status::LimitExceeded => {
                    return ReadReply {
                        data: None,
                        abort: Some(AbortReason::LimitExceeded),
                        stats,
                    }
                }
                Status::FunctionFallback | Status::FunctionError => {
                    return ReadReply { data: None, abort: Some(AbortReason::Transport), stats }
                }
            }
        }
        ReadReply { data: None, abort: Some(abort), stats }
    }

    /// Execute a registered function against `files` starting from one read
    /// of (`initial_fd`, `offset`, `length`). On `Completed` the result is
    /// in `scratch`; on a post-check abort `scratch` is zeroed.
    pub fn read_pushdown(
        &self,
        files: &[u64],
        initial_fd: u8,
        offset: u64,
        length: u64,
        function_id: u32,
        scratch: &mut [u8],
    ) -> PushdownReply {
        self.counters.pushdowns.fetch_add(1, Ordering::Relaxed);
        let mut stats = RequestStats::default();
        let fail = |status: PushdownStatus, stats: RequestStats| PushdownReply { status, stats };
        if files.is_empty()
            || files.len() > crate::wire::MAX_PUSHDOWN_FDS
            || scratch.is_empty()
            || scratch.len() > MAX_SCRATCH_LEN
            || (initial_fd as usize) >= files.len()
        {
            return fail(PushdownStatus::Aborted(AbortReason::Invalid), stats);
        }

        // Pre-submit: every file must be exactly at the version the target
        // last acknowledged.
        let mut fds = Vec::with_capacity(files.len());
        for &inode in files {
            match self.submittable_version(inode) {
                Some(v) => fds.push(FdVersion { inode, version: v }),
                None => {
                    self.counters.pre_aborts.fetch_add(1, Ordering::Relaxed);
                    self.sync.kick();
                    return fail(PushdownStatus::Aborted(AbortReason::PreCheckVersion), stats);
                }
            }
        }

        let req = Message::Pushdown(PushdownCapsule {
            request_id: self.id(),
            function_id,
            fds: fds.clone(),
            initial_fd,
            offset,
            length,
            scratch: scratch.to_vec(),
        });
        let (resp, cost) = match self.transport.roundtrip(&req) {
            Ok(x) => x,
            Err(_) => return fail(PushdownStatus::Aborted(AbortReason::Transport), stats),
        };
        stats.round_trips += 1;
        stats.bytes_sent += cost.bytes_sent;
        stats.bytes_received += cost.bytes_received;
        self.counters.round_trips.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_sent.fetch_add(cost.bytes_sent, Ordering::Relaxed);
        self.counters
            .bytes_received
            .fetch_add(cost.bytes_received, Ordering::Relaxed);
        let Message::PushdownResp(resp) = resp else {
            return fail(PushdownStatus::Aborted(AbortReason::Transport), stats);
        };
        stats.resubmissions = resp.resubmissions;
        stats.device_reads = resp.device_reads;

        // Post-complete: all files must still match what was submitted.
        // Blocks freed by a remap may already carry other files' bytes, so
        // a completed-but-raced result is poisoned; wipe it.
        let racy = fds
            .iter()
            .any(|fd| self.store.current_version(fd.inode).ok() != Some(fd.version));
        if racy {
            self.counters.post_aborts.fetch_add(1, Ordering::Relaxed);
            scratch.fill(0);
            self.sync.kick();
            return fail(PushdownStatus::Aborted(AbortReason::PostCheckVersion), stats);
        }

        match resp.status {
            Status::Ok => {
                let Some(result) = resp.scratch else {
                    return fail(PushdownStatus::Aborted(AbortReason::Transport), stats);
                };
                if result.len() > scratch.len() {
                    return fail(PushdownStatus::Aborted(AbortReason::Transport), stats);
                }
                scratch[..result.len()].copy_from_slice(&result);
                self.counters
                    .pushdowns_completed
                    .fetch_add(1, Ordering::Relaxed);
                fail(PushdownStatus::Completed, stats)
            }
            Status::FunctionFallback => {
                self.counters.fallbacks.fetch_add(1, Ordering::Relaxed);
                fail(PushdownStatus::TargetFallback, stats)
            }
            Status::VersionMismatch => {
                self.counters
                    .target_version_rejects
                    .fetch_add(1, Ordering::Relaxed);
                self.sync.kick();
                fail(PushdownStatus::Aborted(AbortReason::TargetVersion), stats)
            }
            Status::FunctionError => {
                fail(PushdownStatus::Aborted(AbortReason::FunctionError), stats)
            }
            Status::LimitExceeded => {
                fail(PushdownStatus::Aborted(AbortReason::LimitExceeded), stats)
            }
            Status::IoError => fail(PushdownStatus::Aborted(AbortReason::TargetIo), stats),
        }
    }
}

impl From<StoreError> for AbortReason {
    fn from(_: StoreError) -> Self {
        AbortReason::Invalid
    }
}
