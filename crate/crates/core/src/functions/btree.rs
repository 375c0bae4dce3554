//! On-target B⁺-tree traversal: point lookup and range scan.
//!
//! Both walk nodes laid out per [`crate::formats::btree`]. Node reads are
//! resubmitted one block at a time; the block size is taken from the block
//! the engine hands over, so the functions are geometry-agnostic.
//!
//! Lookup scratch (96 bytes): envelope, args `[16..24) key`,
//! `[24..32) value_ptr` (filled at the leaf), payload at 32 = the value.
//! Stage 0 descends nodes; stage 1 reads the value's log block.
//!
//! Range scratch: envelope, args `[16..24) lo`, `[24..32) hi` (inclusive),
//! payload at 32: `[u8 has_more][u64 resume_key][u32 count]` then `count ×
//! (u64 key, u64 value_ptr)`. The scan descends to the leaf covering `lo`,
//! then walks the leaf chain. When the payload area fills mid-scan the
//! function finishes with `has_more = 1`; the host re-issues the scan with
//! `lo = resume_key + 1` and concatenates. Values are returned as log
//! pointers, not dereferenced — a range scan reads index leaves only.

use crate::formats::btree::{parse_node, route, Node};
use crate::functions::{envelope, StepOutcome, StorageFn, FALLBACK_PARSE};

pub const LOOKUP_MAGIC: u8 = 0xB1;
pub const RANGE_MAGIC: u8 = 0xB2;

const KEY_OFF: usize = 16;
const PTR_OFF: usize = 24;
const LOOKUP_PAYLOAD_OFF: usize = 32;
pub const LOOKUP_VALUE_LEN: usize = 64;
pub const LOOKUP_SCRATCH_LEN: usize = LOOKUP_PAYLOAD_OFF + LOOKUP_VALUE_LEN;

const LO_OFF: usize = 16;
const HI_OFF: usize = 24;
const RANGE_PAYLOAD_OFF: usize = 32;
const RANGE_PAYLOAD_HEADER: usize = 13; // has_more + resume_key + count
pub const RANGE_PAIR_LEN: usize = 16;
/// Smallest scratch able to return one pair.
pub const RANGE_MIN_SCRATCH_LEN: usize = RANGE_PAYLOAD_OFF + RANGE_PAYLOAD_HEADER + RANGE_PAIR_LEN;

const STAGE_DESCEND: u8 = 0;
const STAGE_LOG: u8 = 1;
const STAGE_SCAN: u8 = 1;

fn get_u64(scratch: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(scratch[off..off + 8].try_into().unwrap())
}

fn put_u64(scratch: &mut [u8], off: usize, v: u64) {
    scratch[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

/// Build the host-side scratch for a point lookup.
pub fn lookup_scratch(key: u64) -> Vec<u8> {
    let mut s = vec![0u8; LOOKUP_SCRATCH_LEN];
    envelope::init(&mut s, LOOKUP_MAGIC, LOOKUP_PAYLOAD_OFF as u32);
    put_u64(&mut s, KEY_OFF, key);
    s
}

/// Build a lookup scratch that starts at the log stage because the host
/// resolved the leaf from its cached levels and already knows the value
/// pointer.
pub fn lookup_scratch_at_log(key: u64, value_ptr: u64) -> Vec<u8> {
    let mut s = lookup_scratch(key);
    envelope::set_stage(&mut s, STAGE_LOG);
    put_u64(&mut s, PTR_OFF, value_ptr);
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LookupResult {
    Found(Vec<u8>),
    Absent,
}

pub fn parse_lookup_result(scratch: &[u8]) -> Option<LookupResult> {
    let (tag, payload) = envelope::result(scratch, LOOKUP_MAGIC)?;
    match tag {
        envelope::TAG_FOUND => Some(LookupResult::Found(payload.to_vec())),
        envelope::TAG_ABSENT if payload.is_empty() => Some(LookupResult::Absent),
        _ => None,
    }
}

pub struct BtreeLookupFn;

impl StorageFn for BtreeLookupFn {
    fn name(&self) -> &'static str {
        "btree_lookup"
    }

    fn step(&self, block: &[u8], scratch: &mut [u8]) -> StepOutcome {
        if !envelope::check(scratch, LOOKUP_MAGIC) || scratch.len() < LOOKUP_SCRATCH_LEN {
            return StepOutcome::Fallback { reason: FALLBACK_PARSE };
        }
        let key = get_u64(scratch, KEY_OFF);
        match envelope::stage(scratch) {
            STAGE_DESCEND => match parse_node(block) {
                Ok(Node::Internal { keys, children }) => {
                    let child = children[route(&keys, key)];
                    StepOutcome::Resubmit {
                        fd_index: 0,
                        offset: child,
                        length: block.len() as u64,
                    }
                }
                Ok(Node::Leaf { entries, .. }) => {
                    match entries.binary_search_by_key(&key, |e| e.0) {
                        Ok(i) => {
                            let ptr = entries[i].1;
                            put_u64(scratch, PTR_OFF, ptr);
                            envelope::set_stage(scratch, STAGE_LOG);
                            // Fetch the whole block holding the value; the
                            // log packs values so none straddles blocks.
                            let bs = block.len() as u64;
                            StepOutcome::Resubmit {
                                fd_index: 0,
                                offset: ptr - ptr % bs,
                                length: bs,
                            }
                        }
                        Err(_) => {
                            envelope::set_tag(scratch, envelope::TAG_ABSENT);
                            envelope::set_payload_len(scratch, 0);
                            StepOutcome::Done { result_len: envelope::result_len(scratch) }
                        }
                    }
                }
                Err(_) => StepOutcome::Fallback { reason: FALLBACK_PARSE },
            },
            STAGE_LOG => {
                let ptr = get_u64(scratch, PTR_OFF);
                let within = (ptr % block.len() as u64) as usize;
                if within + LOOKUP_VALUE_LEN > block.len() {
                    return StepOutcome::Fallback { reason: FALLBACK_PARSE };
                }
                scratch[LOOKUP_PAYLOAD_OFF..LOOKUP_PAYLOAD_OFF + LOOKUP_VALUE_LEN]
                    .copy_from_slice(&block[within..within + LOOKUP_VALUE_LEN]);
                envelope::set_tag(scratch, envelope::TAG_FOUND);
                envelope::set_payload_len(scratch, LOOKUP_VALUE_LEN as u32);
                StepOutcome::Done { result_len: envelope::result_len(scratch) }
            }
            _ => StepOutcome::Fallback { reason: FALLBACK_PARSE },
        }
    }
}

/// Build the host-side scratch for a range scan; `budget` is the total
/// scratch size (clamped up to the minimum that fits one pair).
pub fn range_scratch(lo: u64, hi: u64, budget: usize) -> Vec<u8> {
    let mut s = vec![0u8; budget.max(RANGE_MIN_SCRATCH_LEN)];
    envelope::init(&mut s, RANGE_MAGIC, RANGE_PAYLOAD_OFF as u32);
    put_u64(&mut s, LO_OFF, lo);
    put_u64(&mut s, HI_OFF, hi);
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RangeResult {
    pub pairs: Vec<(u64, u64)>,
    /// Key to resume after when the payload filled up.
    pub resume_after: Option<u64>,
}

pub fn parse_range_result(scratch: &[u8]) -> Option<RangeResult> {
    let (tag, payload) = envelope::result(scratch, RANGE_MAGIC)?;
    if tag != envelope::TAG_FOUND || payload.len() < RANGE_PAYLOAD_HEADER {
        return None;
    }
    let has_more = payload[0];
    let resume_key = u64::from_le_bytes(payload[1..9].try_into().unwrap());
    let count = u32::from_le_bytes(payload[9..13].try_into().unwrap()) as usize;
    if payload.len() != RANGE_PAYLOAD_HEADER + count * RANGE_PAIR_LEN {
        return None;
    }
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let base = RANGE_PAYLOAD_HEADER + i * RANGE_PAIR_LEN;
        pairs.push((
            u64::from_le_bytes(payload[base..base + 8].try_into().unwrap()),
            u64::from_le_bytes(payload[base + 8..base + 16].try_into().unwrap()),
        ));
    }
    Some(RangeResult {
        pairs,
        resume_after: (has_more != 0).then_some(resume_key),
    })
}

pub struct BtreeRangeFn;

struct RangeState {
    count: u32,
    last_key: u64,
}

impl BtreeRangeFn {
    fn finish(scratch: &mut [u8], st: &RangeState, has_more: bool) -> StepOutcome {
        let off = envelope::payload_off(scratch) as usize;
        scratch[off] = has_more as u8;
        scratch[off + 1..off + 9].copy_from_slice(&st.last_key.to_le_bytes());
        scratch[off + 9..off + 13].copy_from_slice(&st.count.to_le_bytes());
        envelope::set_tag(scratch, envelope::TAG_FOUND);
        envelope::set_payload_len(
            scratch,
            (RANGE_PAYLOAD_HEADER + st.count as usize * RANGE_PAIR_LEN) as u32,
        );
        StepOutcome::Done { result_len: envelope::result_len(scratch) }
    }
}

impl StorageFn for BtreeRangeFn {
    fn step(&self, block: &[u8], scratch: &mut [u8]) -> StepOutcome {
        if !envelope::check(scratch, RANGE_MAGIC) || scratch.len() < RANGE_MIN_SCRATCH_LEN {
            return StepOutcome::Fallback { reason: FALLBACK_PARSE };
        }
        let lo = get_u64(scratch, LO_OFF);
        let hi = get_u64(scratch, HI_OFF);
        let stage = envelope::stage(scratch);
        let node = match parse_node(block) {
            Ok(n) => n,
            Err(_) => return StepOutcome::Fallback { reason: FALLBACK_PARSE },
        };
        match (stage, node) {
            (STAGE_DESCEND, Node::Internal { keys, children }) => {
                let child = children[route(&keys, lo)];
                StepOutcome::Resubmit {
                    fd_index: 0,
                    offset: child,
                    length: block.len() as u64,
                }
            }
            // First leaf reached (possibly directly if the tree is one
            // level) — fall through to scanning.
            (STAGE_DESCEND | STAGE_SCAN, Node::Leaf { next, entries }) => {
                envelope::set_stage(scratch, STAGE_SCAN);
                let payload_off = envelope::payload_off(scratch) as usize;
                let capacity = envelope::payload_capacity(scratch);
                let mut st = RangeState {
                    count: u32::from_le_bytes(
                        scratch[payload_off + 9..payload_off + 13].try_into().unwrap(),
                    ),
                    last_key: u64::from_le_bytes(
                        scratch[payload_off + 1..payload_off + 9].try_into().unwrap(),
                    ),
                };
                let mut saw_past_hi = false;
                for (k, ptr) in entries {
                    if k < lo {
                        continue;
                    }
                    if k > hi {
                        saw_past_hi = true;
                        break;
                    }
                    let pos = payload_off
                        + RANGE_PAYLOAD_HEADER
                        + st.count as usize * RANGE_PAIR_LEN;
                    if pos + RANGE_PAIR_LEN > payload_off + capacity {
                        // Payload full: report what we have with a resume key.
                        return Self::finish(scratch, &st, true);
                    }
                    scratch[pos..pos + 8].copy_from_slice(&k.to_le_bytes());
                    scratch[pos + 8..pos + 16].copy_from_slice(&ptr.to_le_bytes());
                    st.count += 1;
                    st.last_key = k;
                    // Persist progress so the state survives the resubmit.
                    scratch[payload_off + 1..payload_off + 9]
                        .copy_from_slice(&st.last_key.to_le_bytes());
                    scratch[payload_off + 9..payload_off + 13]
                        .copy_from_slice(&st.count.to_le_bytes());
                }
                if saw_past_hi || next == 0 {
                    Self::finish(scratch, &st, false)
                } else {
                    StepOutcome::Resubmit {
                        fd_index: 0,
                        offset: next,
                        length: block.len() as u64,
                    }
                }
            }
            _ => StepOutcome::Fallback { reason: FALLBACK_PARSE },
        }
    }

    fn name(&self) -> &'static str {
        "btree_range"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::btree::{encode_internal, encode_leaf};

    /// Two-level tree: root at 512 routing to leaves at 1024/1536/2048, log
    /// values at 4096. Returns (blocks by offset, expected pairs).
    fn tiny_tree() -> std::collections::HashMap<u64, Vec<u8>> {
        let mut blocks = std::collections::HashMap::new();
        blocks.insert(512, encode_internal(512, &[100, 200], &[1024, 1536, 2048]));
        blocks.insert(1024, encode_leaf(512, 1536, &[(10, 4096), (50, 4160)]));
        blocks.insert(1536, encode_leaf(512, 2048, &[(100, 4224), (150, 4288)]));
        blocks.insert(2048, encode_leaf(512, 0, &[(200, 4352), (250, 4416)]));
        let mut log = vec![0u8; 512];
        for (i, base) in [4096u64, 4160, 4224, 4288, 4352, 4416].iter().enumerate() {
            let within = (*base - 4096) as usize;
            log[within..within + 64].fill(i as u8 + 1);
        }
        blocks.insert(4096, log);
        blocks
    }

    fn run_lookup(key: u64) -> (Vec<StepOutcome>, Vec<u8>) {
        let blocks = tiny_tree();
        let f = BtreeLookupFn;
        let mut scratch = lookup_scratch(key);
        let mut outcomes = Vec::new();
        let mut cursor = 512u64;
        loop {
            let block = &blocks[&cursor];
            let out = f.step(block, &mut scratch);
            outcomes.push(out);
            match out {
                StepOutcome::Resubmit { offset, .. } => cursor = offset,
                _ => break,
            }
        }
        (outcomes, scratch)
    }

    #[test]
    fn lookup_found() {
        let (outcomes, scratch) = run_lookup(150);
        assert_eq!(outcomes.len(), 3); // root, leaf, log
        assert!(matches!(outcomes[2], StepOutcome::Done { .. }));
        assert_eq!(
            parse_lookup_result(&scratch),
            Some(LookupResult::Found(vec![4u8; 64]))
        );
    }

    #[test]
    fn lookup_absent() {
        let (outcomes, scratch) = run_lookup(151);
        assert_eq!(outcomes.len(), 2); // root, leaf
        assert_eq!(parse_lookup_result(&scratch), Some(LookupResult::Absent));
    }

    #[test]
    fn lookup_replay_is_deterministic() {
        let (a, sa) = run_lookup(200);
        let (b, sb) = run_lookup(200);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn lookup_rejects_garbage_block() {
        let f = BtreeLookupFn;
        let mut scratch = lookup_scratch(1);
        assert_eq!(
            f.step(&[0u8; 512], &mut scratch),
            StepOutcome::Fallback { reason: FALLBACK_PARSE }
        );
        // Bad scratch magic is also refused.
        let mut bad = lookup_scratch(1);
        bad[0] = 0xEE;
        assert_eq!(
            f.step(&tiny_tree()[&512], &mut bad),
            StepOutcome::Fallback { reason: FALLBACK_PARSE }
        );
    }

    fn run_range(lo: u64, hi: u64, budget: usize) -> RangeResult {
        let blocks = tiny_tree();
        let f = BtreeRangeFn;
        let mut scratch = range_scratch(lo, hi, budget);
        let mut cursor = 512u64;
        loop {
            match f.step(&blocks[&cursor], &mut scratch) {
                StepOutcome::Resubmit { offset, .. } => cursor = offset,
                StepOutcome::Done { .. } => break,
                other => panic!("unexpected outcome {other:?}"),
            }
        }
        parse_range_result(&scratch).expect("valid result")
    }

    #[test]
    fn range_scans_across_leaves() {
        let r = run_range(50, 220, 4096);
        assert_eq!(
            r.pairs,
            vec![(50, 4160), (100, 4224), (150, 4288), (200, 4352)]
        );
        assert_eq!(r.resume_after, None);
    }

    #[test]
    fn range_empty_interval() {
        let r = run_range(120, 130, 4096);
        assert_eq!(r.pairs, vec![]);
        assert_eq!(r.resume_after, None);
        let r = run_range(300, 400, 4096);
        assert_eq!(r.pairs, vec![]);
    }

    #[test]
    fn range_resumes_when_payload_fills() {
        // Budget for exactly two pairs.
        let budget = RANGE_PAYLOAD_OFF + RANGE_PAYLOAD_HEADER + 2 * RANGE_PAIR_LEN;
        let mut all = Vec::new();
        let mut lo = 10u64;
        let mut calls = 0;
        loop {
            let r = run_range(lo, 250, budget);
            all.extend(r.pairs.clone());
            calls += 1;
            match r.resume_after {
                Some(k) => lo = k + 1,
                None => break,
            }
            assert!(calls < 10, "no progress");
        }
        assert_eq!(
            all,
            vec![
                (10, 4096),
                (50, 4160),
                (100, 4224),
                (150, 4288),
                (200, 4352),
                (250, 4416)
            ]
        );
        assert!(calls >= 3);
    }
}
