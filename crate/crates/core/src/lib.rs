//! Core building blocks for remote block storage with function pushdown.
//!
//! The crate models a disaggregated deployment split across two roles that
//! may live in one process (tests, embedded benchmarks) or two (TCP):
//!
//! * **Host** — owns the authoritative file layer: an [`store::ExtentStore`]
//!   mapping file offsets to device blocks, a [`sync::Synchronizer`] that
//!   ships extent maps to the target off the data path, and a
//!   [`host::HostClient`] that issues plain reads and pushdown requests.
//! * **Target** — owns the raw [`block::BlockDevice`], a
//!   [`sync::ReplicaStore`] of versioned extent maps, and a
//!   [`target::TargetEngine`] that executes registered storage functions,
//!   resubmitting data-dependent reads locally instead of bouncing each hop
//!   back to the host.
//!
//! Version checks on both ends (before submission and after completion)
//! guarantee that a pushdown result never reflects a stale extent map, no
//! matter how the file is remapped mid-flight; see [`host`] and [`target`]
//! for the exact check points.

pub mod block;
pub mod extent;
pub mod formats;
pub mod functions;
pub mod host;
pub mod loopback;
pub mod net;
pub mod store;
pub mod sync;
pub mod target;
pub mod wire;
