//! Key-value stores that exercise the remote-read protocol end to end.
//!
//! Two engines with very different read shapes share the same host client:
//!
//! * [`btree`] — an immutable B⁺-tree of 512-byte nodes over an unsorted
//!   value log. Reads are pointer chases: each block names the next one,
//!   the worst case for a networked block device and the best case for
//!   target-side execution.
//! * [`lsm`] — a leveled LSM tree with a MemTable, block cache, and
//!   compaction. Reads consult many files; the interesting machinery is
//!   *query splitting* (answer from cached blocks where possible, ship the
//!   uncached remainder as one chained request) and *cache sampling*
//!   (route a small fraction of reads through the block-by-block path so
//!   the cache stays warm).

pub mod btree;
pub mod lsm;

/// How lookups travel to the storage target.
///
/// Both engines answer identically in either mode; only message shape and
/// count differ. Baseline transfers every block the query touches, one
/// round trip each; pushdown ships the chain to the target and gets back
/// the final result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Pushdown,
}
