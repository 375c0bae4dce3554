//! Asynchronous extent-map synchronization between host and target.
//!
//! Layout mutations enqueue the file's inode on a coalescing [`ChangeQueue`]
//! (an inode appears at most once no matter how many mutations race in). A
//! [`Synchronizer`] drains the queue off the data path: for each inode it
//! snapshots the *current* map — intermediate versions are never sent — ships
//! it as a [`SyncRecord`], and on ack records the version in its
//! [`SentVersionTable`]. That table is what the host's pre-submission check
//! consults: a request is only sent when the current version has provably
//! reached the target.
//!
//! The target side is a [`ReplicaStore`]: versioned maps applied
//! monotonically (stale records are ignored, the ack always reports the
//! replica's resulting version).
//!
//! Nothing here blocks the data path: mutations only append to the queue,
//! and a stalled transport leaves requests aborting cleanly on version
//! checks rather than hanging.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};

use crate::extent::ExtentMap;
use crate::store::{ChangeListener, ExtentStore};
use crate::wire::{SyncAck, SyncRecord, WireError};

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error("sync transport: {0}")]
    Transport(String),
    #[error("sync i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("replica rejected record for inode {inode}: {reason}")]
    Rejected { inode: u64, reason: String },
    #[error("ack version {acked} below sent version {sent} for inode {inode}")]
    BadAck { inode: u64, sent: u64, acked: u64 },
}

/// FIFO of inodes with pending layout changes; duplicate notifications
/// coalesce onto the existing entry.
#[derive(Default)]
pub struct ChangeQueue {
    inner: Mutex<QueueInner>,
    cond: Condvar,
}

#[derive(Default)]
struct QueueInner {
    order: VecDeque<u64>,
    members: HashSet<u64>,
    kicks: u64,
}

impl ChangeQueue {
    pub fn new() -> Arc<Self> {
        Arc::new(ChangeQueue::default())
    }

    pub fn push(&self, inode: u64) {
        let mut inner = self.inner.lock();
        if inner.members.insert(inode) {
            inner.order.push_back(inode);
        }
        self.cond.notify_all();
    }

    /// Re-queue at the front (transport failure path), preserving order.
    fn push_front_all(&self, inodes: &[u64]) {
        let mut inner = self.inner.lock();
        for &inode in inodes.iter().rev() {
            if inner.members.insert(inode) {
                inner.order.push_front(inode);
            }
        }
        self.cond.notify_all();
    }

    pub fn drain(&self) -> Vec<u64> {
        let mut inner = self.inner.lock();
        inner.members.clear();
        inner.order.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Wake any waiter even without new work (used to trigger an immediate
    /// drain attempt after a version-check abort).
    pub fn kick(&self) {
        let mut inner = self.inner.lock();
        inner.kicks += 1;
        self.cond.notify_all();
    }

    /// Block until the queue is non-empty, a kick arrives, or the timeout
    /// elapses. Returns whether there is queued work.
    pub fn wait_activity(&self, timeout: Duration) -> bool {
        let mut inner = self.inner.lock();
        let kicks = inner.kicks;
        if inner.order.is_empty() && inner.kicks == kicks {
            let deadline = Instant::now() + timeout;
            while inner.order.is_empty() && inner.kicks == kicks {
                if self.cond.wait_until(&mut inner, deadline).timed_out() {
                    break;
                }
            }
        }
        !inner.order.is_empty()
    }
}

impl ChangeListener for ChangeQueue {
    fn file_changed(&self, inode: u64) {
        self.push(inode);
    }
}

/// Versions known to have been applied by the target, per inode.
#[derive(Default)]
pub struct SentVersionTable {
    map: Mutex<HashMap<u64, u64>>,
}

impl SentVersionTable {
    pub fn get(&self, inode: u64) -> Option<u64> {
        self.map.lock().get(&inode).copied()
    }

    fn advance(&self, inode: u64, version: u64) {
        let mut map = self.map.lock();
        let e = map.entry(inode).or_insert(0);
        *e = (*e).max(version);
    }
}

/// Ships one record and returns the target's ack.
pub trait SyncTransport: Send + Sync {
    fn send_record(&self, record: &SyncRecord) -> Result<SyncAck, SyncError>;
}

/// Host-side synchronizer: drains the change queue through a transport.
pub struct Synchronizer {
    store: Arc<ExtentStore>,
    queue: Arc<ChangeQueue>,
    sent: SentVersionTable,
    transport: Box<dyn SyncTransport>,
}

impl Synchronizer {
    /// Builds the synchronizer and installs its queue as the store's change
    /// listener, so every mutation from now on is queued automatically.
    pub fn new(store: Arc<ExtentStore>, transport: Box<dyn SyncTransport>) -> Arc<Self> {
        let queue = ChangeQueue::new();
        store.set_change_listener(queue.clone());
        Arc::new(Synchronizer {
            store,
            queue,
            sent: SentVersionTable::default(),
            transport,
        })
    }

    pub fn queue(&self) -> &Arc<ChangeQueue> {
        &self.queue
    }

    /// Version of `inode` known to be applied on the target.
    pub fn sent_version(&self, inode: u64) -> Option<u64> {
        self.sent.get(inode)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn kick(&self) {
        self.queue.kick();
    }

    /// Drain everything currently queued, shipping one record per inode
    /// (the current snapshot — multiple queued mutations coalesce). On
    /// transport failure the unsent inodes are re-queued and the error is
    /// returned; a later drain retries them. Returns records shipped.
    pub fn drain_once(&self) -> Result<usize, SyncError> {
        let inodes = self.queue.drain();
        let mut shipped = 0;
        for (i, &inode) in inodes.iter().enumerate() {
            // The file may have been deleted since it was queued; its replica
            // is intentionally left in place on the target.
            let Ok(snap) = self.store.snapshot(inode) else {
                continue;
            };
            if self.sent.get(inode) >= Some(snap.version) {
                continue;
            }
            let record = SyncRecord::from_map(&snap);
            match self.transport.send_record(&record) {
                Ok(ack) => {
                    if ack.inode != inode || ack.version < record.version {
                        self.queue.push_front_all(&inodes[i..]);
                        return Err(SyncError::BadAck {
                            inode,
                            sent: record.version,
                            acked: ack.version,
                        });
                    }
                    // The ack proves `record.version` (at least) is applied.
                    self.sent.advance(inode, record.version);
                    shipped += 1;
                }
                Err(e) => {
                    self.queue.push_front_all(&inodes[i..]);
                    return Err(e);
                }
            }
        }
        Ok(shipped)
    }

    /// Drain until the queue stays empty. Bounded; for tests and benchmark
    /// load phases where the mutators have quiesced.
    pub fn drain_until_clean(&self, max_rounds: usize) -> Result<(), SyncError> {
        for _ in 0..max_rounds {
            self.drain_once()?;
            if self.queue.is_empty() {
                return Ok(());
            }
        }
        Err(SyncError::Transport(format!(
            "queue still busy after {max_rounds} drain rounds"
        )))
    }

    /// Poll until `inode`'s sent version reaches `version` (used between
    /// plain-read retries). Never holds locks while waiting.
    pub fn wait_for_version(&self, inode: u64, version: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.sent.get(inode) >= Some(version) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
    }
}

/// Background drain thread. Wakes on queue activity or every `poll`
/// interval; transport errors leave the work queued for the next round.
pub struct SyncDaemon {
    stop: Arc<AtomicBool>,
    queue: Arc<ChangeQueue>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl SyncDaemon {
    pub fn spawn(sync: Arc<Synchronizer>, poll: Duration) -> SyncDaemon {
        let stop = Arc::new(AtomicBool::new(false));
        let queue = sync.queue().clone();
        let stop2 = stop.clone();
        let handle = std::thread::Builder::new()
            .name("extent-sync".into())
            .spawn(move || {
                while !stop2.load(Ordering::Acquire) {
                    sync.queue().wait_activity(poll);
                    if stop2.load(Ordering::Acquire) {
                        break;
                    }
                    if let Err(e) = sync.drain_once() {
                        log::debug!("sync drain failed, will retry: {e}");
                        std::thread::sleep(poll);
                    }
                }
            })
            .expect("spawn sync daemon");
        SyncDaemon {
            stop,
            queue,
            handle: Some(handle),
        }
    }
}

impl Drop for SyncDaemon {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        self.queue.kick();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Target-side table of replicated extent maps.
#[derive(Default)]
pub struct ReplicaStore {
    files: RwLock<HashMap<u64, Arc<ExtentMap>>>,
}

impl ReplicaStore {
    pub fn new() -> Arc<Self> {
        Arc::new(ReplicaStore::default())
    }

    /// Apply a record monotonically: stale or duplicate versions are ignored.
    /// The ack reports the replica's version after the call, so a stale
    /// sender still learns the newer version exists. Malformed maps are
    /// rejected outright.
    pub fn apply(&self, record: SyncRecord, block_size: u32) -> Result<SyncAck, SyncError> {
        let inode = record.inode;
        let map = record.into_map();
        map.validate(block_size).map_err(|e| SyncError::Rejected {
            inode,
            reason: e.to_string(),
        })?;
        let mut files = self.files.write();
        let entry = files.entry(inode);
        let version = match entry {
            std::collections::hash_map::Entry::Occupied(mut o) => {
                if o.get().version < map.version {
                    o.insert(Arc::new(map));
                }
                o.get().version
            }
            std::collections::hash_map::Entry::Vacant(v) => {
                let version = map.version;
                v.insert(Arc::new(map));
                version
            }
        };
        Ok(SyncAck { inode, version })
    }

    /// Pin the replica snapshot for `inode`.
    pub fn get(&self, inode: u64) -> Option<Arc<ExtentMap>> {
        self.files.read().get(&inode).cloned()
    }

    pub fn version(&self, inode: u64) -> Option<u64> {
        self.files.read().get(&inode).map(|m| m.version)
    }

    pub fn len(&self) -> usize {
        self.files.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.read().is_empty()
    }
}

/// Loopback transport: encodes each record through the real wire codec,
/// applies it to a replica store, and decodes the ack — so in-process tests
/// cover the same byte path as TCP.
pub struct InProcSyncTransport {
    replicas: Arc<ReplicaStore>,
    block_size: u32,
}

impl InProcSyncTransport {
    pub fn new(replicas: Arc<ReplicaStore>, block_size: u32) -> Self {
        InProcSyncTransport {
            replicas,
            block_size,
        }
    }
}

impl SyncTransport for InProcSyncTransport {
    fn send_record(&self, record: &SyncRecord) -> Result<SyncAck, SyncError> {
        let bytes = crate::wire::encode_sync_record(record)?;
        let (decoded, n) = crate::wire::decode_sync_record(&bytes)?;
        debug_assert_eq!(n, bytes.len());
        let ack = self.replicas.apply(decoded, self.block_size)?;
        let ack_bytes = crate::wire::encode_sync_ack(&ack);
        let (ack, _) = crate::wire::decode_sync_ack(&ack_bytes)?;
        Ok(ack)
    }
}
