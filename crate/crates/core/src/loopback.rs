//! One-call wiring of a complete host/target pair in a single process.
//!
//! Everything real is here — the wire codec runs on every request, the
//! sync path moves maps through the same records TCP would carry — only
//! the network is elided. Tests and in-process benchmarks build on this.

use std::sync::Arc;
use std::time::Duration;

use crate::block::BlockDevice;
use crate::host::{HostClient, InProcTransport};
use crate::store::{ExtentStore, StoreConfig};
use crate::sync::{InProcSyncTransport, ReplicaStore, SyncDaemon, Synchronizer};
use crate::target::{ExecutionLimits, TargetEngine};

#[derive(Clone, Debug)]
pub struct LoopbackOptions {
    pub block_size: u32,
    pub capacity_blocks: u64,
    /// Probability that an allocation is deliberately split (tests the
    /// multi-extent paths); 0.0 allocates contiguously when possible.
    pub fragment_probability: f64,
    pub fragment_seed: u64,
    pub limits: ExecutionLimits,
    /// Run the background sync thread. Tests that want deterministic
    /// control call `sync.drain_once()` themselves instead.
    pub spawn_drainer: bool,
    pub drain_poll: Duration,
}

impl Default for LoopbackOptions {
    fn default() -> Self {
        LoopbackOptions {
            block_size: 512,
            capacity_blocks: 1 << 16,
            fragment_probability: 0.0,
            fragment_seed: 0,
            limits: ExecutionLimits::default(),
            spawn_drainer: false,
            drain_poll: Duration::from_millis(1),
        }
    }
}

pub struct Loopback {
    pub device: Arc<BlockDevice>,
    pub store: Arc<ExtentStore>,
    pub replicas: Arc<ReplicaStore>,
    pub engine: Arc<TargetEngine>,
    pub sync: Arc<Synchronizer>,
    pub client: Arc<HostClient>,
    pub daemon: Option<SyncDaemon>,
}

impl Loopback {
    pub fn new(opts: LoopbackOptions) -> Loopback {
        let device = Arc::new(BlockDevice::memory(opts.block_size, opts.capacity_blocks));
        let store = ExtentStore::new(
            device.clone(),
            StoreConfig {
                fragment_probability: opts.fragment_probability,
                fragment_seed: opts.fragment_seed,
            },
        );
        let replicas = ReplicaStore::new();
        let sync = Synchronizer::new(
            store.clone(),
            Box::new(InProcSyncTransport::new(replicas.clone(), opts.block_size)),
        );
        let engine =
            TargetEngine::with_standard_functions(device.clone(), replicas.clone(), opts.limits);
        let client = HostClient::new(
            store.clone(),
            sync.clone(),
            Box::new(InProcTransport::new(engine.clone())),
        );
        let daemon = opts
            .spawn_drainer
            .then(|| SyncDaemon::spawn(sync.clone(), opts.drain_poll));
        Loopback { device, store, replicas, engine, sync, client, daemon }
    }

    /// Push all queued map changes through and confirm the target caught up.
    pub fn sync_now(&self) {
        self.sync.drain_until_clean(64).expect("sync drain failed");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loopback_read_roundtrip() {
        let rig = Loopback::new(LoopbackOptions::default());
        let inode = rig.store.create_file("f").unwrap();
        let data: Vec<u8> = (0..3072u32).map(|i| (i % 97) as u8).collect();
        rig.store.append(inode, &data).unwrap();
        rig.sync_now();
        let reply = rig.client.read_remote(inode, 500, 1000);
        assert_eq!(reply.data.as_deref(), Some(&data[500..1500]));
    }

    #[test]
    fn loopback_with_daemon_syncs_in_background() {
        let rig = Loopback::new(LoopbackOptions {
            spawn_drainer: true,
            ..LoopbackOptions::default()
        });
        let inode = rig.store.create_file("f").unwrap();
        rig.store.append(inode, &[3u8; 2048]).unwrap();
        let v = rig.store.current_version(inode).unwrap();
        assert!(rig
            .sync
            .wait_for_version(inode, v, Duration::from_secs(5)));
        let reply = rig.client.read_remote(inode, 0, 2048);
        assert_eq!(reply.data, Some(vec![3u8; 2048]));
    }
}
