//! Storage functions: small deterministic state machines the target runs
//! against block data, carrying all state in a caller-provided scratch
//! buffer.
//!
//! The engine feeds the function one block read at a time. After each block
//! the function either asks for another read ([`StepOutcome::Resubmit`]),
//! finishes ([`StepOutcome::Done`]), or declines further on-target work
//! ([`StepOutcome::Fallback`], e.g. on a parse failure — the host then redoes
//! the query through plain reads). Functions never touch anything but the
//! presented block and the scratch, which makes a pushdown's behavior a pure
//! function of (scratch, block sequence) — replayable and testable without a
//! device.
//!
//! Registered function ids:
//!
//! | id | function | scratch args |
//! |----|----------|--------------|
//! | 1  | B⁺-tree point lookup | key |
//! | 2  | B⁺-tree range scan   | lo, hi (inclusive) |
//! | 3  | Sorted-table chain   | key + per-file probe plan |
//!
//! All three share the scratch envelope defined in [`envelope`].

pub mod btree;
pub mod envelope;
pub mod sst;

pub const FN_BTREE_LOOKUP: u32 = 1;
pub const FN_BTREE_RANGE: u32 = 2;
pub const FN_SST_CHAIN: u32 = 3;

/// Follow-up action requested by a function after consuming one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    /// Read `length` bytes at `offset` of file `fd_index` and call again.
    Resubmit { fd_index: u8, offset: u64, length: u64 },
    /// Finished; the first `result_len` scratch bytes are the result.
    Done { result_len: u32 },
    /// Decline on-target execution; the host falls back to plain reads.
    Fallback { reason: u8 },
}

pub const FALLBACK_PARSE: u8 = 1;
pub const FALLBACK_CAPACITY: u8 = 2;

pub trait StorageFn: Send + Sync {
    fn name(&self) -> &'static str;
    fn step(&self, block: &[u8], scratch: &mut [u8]) -> StepOutcome;
}
