//! On-target sorted-table probe chain.
//!
//! The host plans a probe sequence over the table files a key might live in,
//! newest first, skipping every file it can resolve from its own cache. Each
//! plan entry names the file (by fd index), the first block to read (an
//! index block, or directly a data block when the host has the index cached)
//! and that block's extent-aligned length. The function walks the plan: an
//! index block yields the covering data block (resubmit within the same
//! file), a data block yields the value / a tombstone / nothing, and on
//! nothing the chain advances to the next planned file — all without a
//! host round trip.
//!
//! Scratch layout after the envelope:
//!
//! ```text
//! [16..18) u16 key_len        [18..20) u16 plan_count
//! [20..22) u16 plan_cursor    [22..24) pad
//! [24..24+key_len)            key bytes
//! plan_off = 24+key_len rounded up to 8:
//!     plan_count × [u8 fd_index][u8 start_stage][u16 pad][u32 length][u64 offset]
//! payload_off = plan_off + 16·plan_count
//! ```
//!
//! Finished payloads: tag FOUND → the value bytes; tag ABSENT → one reason
//! byte, 0 = plan exhausted (the host may still hold a cached answer from a
//! deeper, already-resolved file), 1 = tombstone (authoritative miss).

use crate::formats::sst::{block_find, index_seek, EntrySearch};
use crate::functions::{envelope, StepOutcome, StorageFn, FALLBACK_CAPACITY, FALLBACK_PARSE};

pub const CHAIN_MAGIC: u8 = 0xC5;

pub const STAGE_INDEX: u8 = 0;
pub const STAGE_DATA: u8 = 1;

pub const ABSENT_EXHAUSTED: u8 = 0;
pub const ABSENT_TOMBSTONE: u8 = 1;

const KEY_LEN_OFF: usize = 16;
const PLAN_COUNT_OFF: usize = 18;
const CURSOR_OFF: usize = 20;
const KEY_OFF: usize = 24;
const PLAN_ENTRY_LEN: usize = 16;

/// One planned probe: where to start reading in file `fd_index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanEntry {
    pub fd_index: u8,
    /// [`STAGE_INDEX`] to start at the file's index block, [`STAGE_DATA`]
    /// to jump straight to a known data block.
    pub start_stage: u8,
    pub offset: u64,
    pub length: u32,
}

fn plan_off(key_len: usize) -> usize {
    (KEY_OFF + key_len + 7) & !7
}

/// Build the chain scratch. `value_budget` caps the returned value size.
pub fn chain_scratch(key: &[u8], plan: &[PlanEntry], value_budget: usize) -> Vec<u8> {
    assert!(!plan.is_empty() && plan.len() <= u16::MAX as usize);
    assert!(key.len() <= u16::MAX as usize);
    let payload_off = plan_off(key.len()) + plan.len() * PLAN_ENTRY_LEN;
    let mut s = vec![0u8; payload_off + value_budget.max(1)];
    envelope::init(&mut s, CHAIN_MAGIC, payload_off as u32);
    envelope::set_stage(&mut s, plan[0].start_stage);
    s[KEY_LEN_OFF..KEY_LEN_OFF + 2].copy_from_slice(&(key.len() as u16).to_le_bytes());
    s[PLAN_COUNT_OFF..PLAN_COUNT_OFF + 2].copy_from_slice(&(plan.len() as u16).to_le_bytes());
    s[CURSOR_OFF..CURSOR_OFF + 2].copy_from_slice(&0u16.to_le_bytes());
    s[KEY_OFF..KEY_OFF + key.len()].copy_from_slice(key);
    let base = plan_off(key.len());
    for (i, e) in plan.iter().enumerate() {
        let off = base + i * PLAN_ENTRY_LEN;
        s[off] = e.fd_index;
        s[off + 1] = e.start_stage;
        s[off + 4..off + 8].copy_from_slice(&e.length.to_le_bytes());
        s[off + 8..off + 16].copy_from_slice(&e.offset.to_le_bytes());
    }
    s
}

/// The initial read the host must request for a chain scratch.
pub fn initial_read(plan: &[PlanEntry]) -> (u8, u64, u64) {
    (plan[0].fd_index, plan[0].offset, plan[0].length as u64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChainResult {
    Found(Vec<u8>),
    /// Authoritative miss: a tombstone shadowed the key.
    Tombstone,
    /// Every planned probe missed; deeper cached candidates may still answer.
    Exhausted,
}

pub fn parse_chain_result(scratch: &[u8]) -> Option<ChainResult> {
    let (tag, payload) = envelope::result(scratch, CHAIN_MAGIC)?;
    match tag {
        envelope::TAG_FOUND => Some(ChainResult::Found(payload.to_vec())),
        envelope::TAG_ABSENT => match payload {
            [ABSENT_EXHAUSTED] => Some(ChainResult::Exhausted),
            [ABSENT_TOMBSTONE] => Some(ChainResult::Tombstone),
            _ => None,
        },
        _ => None,
    }
}

struct View {
    key_len: usize,
    plan_count: usize,
    cursor: usize,
}

fn view(scratch: &[u8]) -> Option<View> {
    let key_len = u16::from_le_bytes(scratch[KEY_LEN_OFF..KEY_LEN_OFF + 2].try_into().unwrap())
        as usize;
    let plan_count =
        u16::from_le_bytes(scratch[PLAN_COUNT_OFF..PLAN_COUNT_OFF + 2].try_into().unwrap())
            as usize;
    let cursor =
        u16::from_le_bytes(scratch[CURSOR_OFF..CURSOR_OFF + 2].try_into().unwrap()) as usize;
    let payload_off = plan_off(key_len) + plan_count * PLAN_ENTRY_LEN;
    if plan_count == 0
        || cursor >= plan_count
        || payload_off != envelope::payload_off(scratch) as usize
        || payload_off >= scratch.len()
    {
        return None;
    }
    Some(View {
        key_len,
        plan_count,
        cursor,
    })
}

fn plan_entry(scratch: &[u8], key_len: usize, i: usize) -> PlanEntry {
    let off = plan_off(key_len) + i * PLAN_ENTRY_LEN;
    PlanEntry {
        fd_index: scratch[off],
        start_stage: scratch[off + 1],
        length: u32::from_le_bytes(scratch[off + 4..off + 8].try_into().unwrap()),
        offset: u64::from_le_bytes(scratch[off + 8..off + 16].try_into().unwrap()),
    }
}

fn finish_absent(scratch: &mut [u8], reason: u8) -> StepOutcome {
    let off = envelope::payload_off(scratch) as usize;
    scratch[off] = reason;
    envelope::set_tag(scratch, envelope::TAG_ABSENT);
    envelope::set_payload_len(scratch, 1);
    StepOutcome::Done { result_len: envelope::result_len(scratch) }
}

pub struct SstChainFn;

impl SstChainFn {
    fn advance(scratch: &mut [u8], v: &View) -> StepOutcome {
        let next = v.cursor + 1;
        if next >= v.plan_count {
            return finish_absent(scratch, ABSENT_EXHAUSTED);
        }
        scratch[CURSOR_OFF..CURSOR_OFF + 2].copy_from_slice(&(next as u16).to_le_bytes());
        let e = plan_entry(scratch, v.key_len, next);
        envelope::set_stage(scratch, e.start_stage);
        StepOutcome::Resubmit {
            fd_index: e.fd_index,
            offset: e.offset,
            length: e.length as u64,
        }
    }
}

impl StorageFn for SstChainFn {
    fn name(&self) -> &'static str {
        "sst_chain"
    }

    fn step(&self, block: &[u8], scratch: &mut [u8]) -> StepOutcome {
        if !envelope::check(scratch, CHAIN_MAGIC) {
            return StepOutcome::Fallback { reason: FALLBACK_PARSE };
        }
        let Some(v) = view(scratch) else {
            return StepOutcome::Fallback { reason: FALLBACK_PARSE };
        };
        let key = scratch[KEY_OFF..KEY_OFF + v.key_len].to_vec();
        let entry = plan_entry(scratch, v.key_len, v.cursor);
        match envelope::stage(scratch) {
            STAGE_INDEX => match index_seek(block, &key) {
                Ok(Some(handle)) => {
                    envelope::set_stage(scratch, STAGE_DATA);
                    StepOutcome::Resubmit {
                        fd_index: entry.fd_index,
                        offset: handle.offset,
                        length: handle.length as u64,
                    }
                }
                // Key past this file's last block: the file cannot hold it.
                Ok(None) => Self::advance(scratch, &v),
                Err(_) => StepOutcome::Fallback { reason: FALLBACK_PARSE },
            },
            STAGE_DATA => match block_find(block, &key) {
                Ok(EntrySearch::Value(value)) => {
                    if value.len() > envelope::payload_capacity(scratch) {
                        return StepOutcome::Fallback { reason: FALLBACK_CAPACITY };
                    }
                    let off = envelope::payload_off(scratch) as usize;
                    scratch[off..off + value.len()].copy_from_slice(&value);
                    envelope::set_tag(scratch, envelope::TAG_FOUND);
                    envelope::set_payload_len(scratch, value.len() as u32);
                    StepOutcome::Done { result_len: envelope::result_len(scratch) }
                }
                Ok(EntrySearch::Tombstone) => finish_absent(scratch, ABSENT_TOMBSTONE),
                Ok(EntrySearch::Absent) => Self::advance(scratch, &v),
                Err(_) => StepOutcome::Fallback { reason: FALLBACK_PARSE },
            },
            _ => StepOutcome::Fallback { reason: FALLBACK_PARSE },
        }
    }
}
