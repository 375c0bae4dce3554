//! Common scratch-buffer envelope shared by all storage functions.
//!
//! The host builds the scratch, the function mutates it in place, and the
//! target returns the `Done { result_len }` prefix. Layout (little-endian):
//!
//! ```text
//! [0]      u8  function magic (distinguishes scratch kinds)
//! [1]      u8  layout version (1)
//! [2]      u8  result tag: 0 pending, 1 found, 2 absent
//! [3]      u8  stage cursor (function-specific)
//! [4..8)   u32 payload length
//! [8..12)  u32 payload offset
//! [12..16) reserved (0)
//! [16..)   function-specific arguments, then the payload area
//! ```

pub const LAYOUT_VERSION: u8 = 1;
pub const ARGS_OFF: usize = 16;

pub const TAG_PENDING: u8 = 0;
pub const TAG_FOUND: u8 = 1;
pub const TAG_ABSENT: u8 = 2;

const MAGIC_OFF: usize = 0;
const VERSION_OFF: usize = 1;
const TAG_OFF: usize = 2;
const STAGE_OFF: usize = 3;
const PAYLOAD_LEN_OFF: usize = 4;
const PAYLOAD_OFF_OFF: usize = 8;

pub fn init(scratch: &mut [u8], magic: u8, payload_off: u32) {
    assert!(scratch.len() >= ARGS_OFF);
    scratch[MAGIC_OFF] = magic;
    scratch[VERSION_OFF] = LAYOUT_VERSION;
    scratch[TAG_OFF] = TAG_PENDING;
    scratch[STAGE_OFF] = 0;
    scratch[PAYLOAD_LEN_OFF..PAYLOAD_LEN_OFF + 4].copy_from_slice(&0u32.to_le_bytes());
    scratch[PAYLOAD_OFF_OFF..PAYLOAD_OFF_OFF + 4].copy_from_slice(&payload_off.to_le_bytes());
    scratch[12..16].fill(0);
}

/// Envelope sanity check run by functions on entry and by result parsers.
pub fn check(scratch: &[u8], magic: u8) -> bool {
    scratch.len() >= ARGS_OFF
        && scratch[MAGIC_OFF] == magic
        && scratch[VERSION_OFF] == LAYOUT_VERSION
        && payload_off(scratch) as usize <= scratch.len()
}

pub fn tag(scratch: &[u8]) -> u8 {
    scratch[TAG_OFF]
}

pub fn set_tag(scratch: &mut [u8], tag: u8) {
    scratch[TAG_OFF] = tag;
}

pub fn stage(scratch: &[u8]) -> u8 {
    scratch[STAGE_OFF]
}

pub fn set_stage(scratch: &mut [u8], stage: u8) {
    scratch[STAGE_OFF] = stage;
}

pub fn payload_len(scratch: &[u8]) -> u32 {
    u32::from_le_bytes(scratch[PAYLOAD_LEN_OFF..PAYLOAD_LEN_OFF + 4].try_into().unwrap())
}

pub fn set_payload_len(scratch: &mut [u8], len: u32) {
    scratch[PAYLOAD_LEN_OFF..PAYLOAD_LEN_OFF + 4].copy_from_slice(&len.to_le_bytes());
}

pub fn payload_off(scratch: &[u8]) -> u32 {
    u32::from_le_bytes(scratch[PAYLOAD_OFF_OFF..PAYLOAD_OFF_OFF + 4].try_into().unwrap())
}

/// Bytes available for the payload.
pub fn payload_capacity(scratch: &[u8]) -> usize {
    scratch.len().saturating_sub(payload_off(scratch) as usize)
}

/// Total result length for the current payload: envelope + args + payload.
pub fn result_len(scratch: &[u8]) -> u32 {
    payload_off(scratch) + payload_len(scratch)
}

/// View of a finished result: tag plus payload slice. `None` when the
/// scratch is not a structurally valid finished result of this kind.
pub fn result(scratch: &[u8], magic: u8) -> Option<(u8, &[u8])> {
    if !check(scratch, magic) {
        return None;
    }
    let tag = tag(scratch);
    if tag == TAG_PENDING {
        return None;
    }
    let off = payload_off(scratch) as usize;
    let len = payload_len(scratch) as usize;
    if off + len > scratch.len() {
        return None;
    }
    Some((tag, &scratch[off..off + len]))
}
