//! Wire formats for the data path and the metadata channel.
//!
//! All integers are little-endian. Data-path messages travel in frames:
//!
//! ```text
//! [u32 total_len][u8 msg_type][payload ...]
//! ```
//!
//! `total_len` counts the type byte plus the payload (not itself) and is
//! capped at 16 MiB. Message types:
//!
//! | type | name          | payload |
//! |------|---------------|---------|
//! | 0x01 | READ          | `[u64 request_id][u64 inode][u64 expected_version][u64 offset][u64 length]` |
//! | 0x02 | READ_RESP     | `[u64 request_id][u8 status][u32 data_len][data]` |
//! | 0x03 | PUSHDOWN      | `[u64 request_id][u32 function_id][u8 fd_count][fd_count × (u64 inode, u64 version)][u8 initial_fd][u64 offset][u64 length][u32 scratch_len][scratch]` |
//! | 0x04 | PUSHDOWN_RESP | `[u64 request_id][u8 status][u32 resubmissions][u32 device_reads]` + `[u32 scratch_len][scratch]` iff status = OK |
//!
//! Metadata channel records are self-delimiting (no outer frame):
//!
//! ```text
//! record: [u32 0x53594E43][u64 inode][u64 version][u64 file_length]
//!         [u32 extent_count][extent_count × (u64 file_offset, u64 device_block, u32 length_blocks)]
//! ack:    [u32 0x53594E41][u64 inode][u64 version]
//! ```
//!
//! Decoding never panics on arbitrary input: every length is validated
//! before allocation and a frame either decodes to exactly its declared
//! length or yields a deterministic error.

use std::io::{self, Read, Write};

use crate::extent::{Extent, ExtentMap};

pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;
/// Upper bound on pushdown scratch buffers.
pub const MAX_SCRATCH_LEN: usize = 64 * 1024;
pub const MAX_PUSHDOWN_FDS: usize = 16;
pub const MAX_SYNC_EXTENTS: u32 = 1 << 20;

pub const MSG_READ: u8 = 0x01;
pub const MSG_READ_RESP: u8 = 0x02;
pub const MSG_PUSHDOWN: u8 = 0x03;
pub const MSG_PUSHDOWN_RESP: u8 = 0x04;

pub const SYNC_RECORD_MAGIC: u32 = 0x5359_4E43;
pub const SYNC_ACK_MAGIC: u32 = 0x5359_4E41;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated")]
    Truncated,
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN}-byte cap")]
    FrameTooLarge(u32),
    #[error("frame length {0} too short for a message type")]
    FrameTooShort(u32),
    #[error("unknown message type {0:#04x}")]
    UnknownMessageType(u8),
    #[error("unknown status code {0}")]
    UnknownStatus(u8),
    #[error("fd count {0} outside 1..=16")]
    BadFdCount(u8),
    #[error("scratch length {0} exceeds the {MAX_SCRATCH_LEN}-byte cap")]
    ScratchTooLarge(u32),
    #[error("declared length disagrees with frame contents")]
    LengthMismatch,
    #[error("bad magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("extent count {0} exceeds the {MAX_SYNC_EXTENTS} cap")]
    TooManyExtents(u32),
    #[error("non-zero data on error status")]
    DataOnError,
}

/// Outcome of a data-path request, carried in every response.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    /// The request's extent-map version did not match the target's replica.
    VersionMismatch = 1,
    /// The function declined on-target execution; redo the work host-side.
    FunctionFallback = 2,
    /// The function misbehaved (parse failure, bad resubmission, panic).
    FunctionError = 3,
    IoError = 4,
    /// A resubmission/step/length limit tripped.
    LimitExceeded = 5,
}

impl Status {
    pub fn from_u8(v: u8) -> Result<Status, WireError> {
        Ok(match v {
            0 => Status::Ok,
            1 => Status::VersionMismatch,
            2 => Status::FunctionFallback,
            3 => Status::FunctionError,
            4 => Status::IoError,
            5 => Status::LimitExceeded,
            other => return Err(WireError::UnknownStatus(other)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadCapsule {
    pub request_id: u64,
    pub inode: u64,
    pub expected_version: u64,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadResponse {
    pub request_id: u64,
    pub status: Status,
    pub data: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FdVersion {
    pub inode: u64,
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PushdownCapsule {
    pub request_id: u64,
    pub function_id: u32,
    /// Files the function may read, with the host's view of their versions.
    pub fds: Vec<FdVersion>,
    pub initial_fd: u8,
    pub offset: u64,
    pub length: u64,
    pub scratch: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PushdownResponse {
    pub request_id: u64,
    pub status: Status,
    pub resubmissions: u32,
    pub device_reads: u32,
    /// Present iff `status == Ok`: the scratch prefix holding the result.
    pub scratch: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Read(ReadCapsule),
    ReadResp(ReadResponse),
    Pushdown(PushdownCapsule),
    PushdownResp(PushdownResponse),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyncRecord {
    pub inode: u64,
    pub version: u64,
    pub file_length: u64,
    pub extents: Vec<Extent>,
}

impl SyncRecord {
    pub fn from_map(map: &ExtentMap) -> Self {
        SyncRecord {
            inode: map.inode,
            version: map.version,
            file_length: map.file_length,
            extents: map.extents.clone(),
        }
    }

    pub fn into_map(self) -> ExtentMap {
        ExtentMap {
            inode: self.inode,
            version: self.version,
            file_length: self.file_length,
            extents: self.extents,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyncAck {
    pub inode: u64,
    pub version: u64,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        if end > self.buf.len() {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::LengthMismatch)
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Encode a message into a complete frame. Fails on structurally invalid
/// messages (oversized scratch, fd count out of range) rather than emitting
/// bytes the peer would reject.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = vec![0u8; 4];
    match msg {
        Message::Read(m) => {
            out.push(MSG_READ);
            put_u64(&mut out, m.request_id);
            put_u64(&mut out, m.inode);
            put_u64(&mut out, m.expected_version);
            put_u64(&mut out, m.offset);
            put_u64(&mut out, m.length);
        }
        Message::ReadResp(m) => {
            if m.status != Status::Ok && !m.data.is_empty() {
                return Err(WireError::DataOnError);
            }
            out.push(MSG_READ_RESP);
            put_u64(&mut out, m.request_id);
            out.push(m.status as u8);
            put_u32(&mut out, m.data.len() as u32);
            out.extend_from_slice(&m.data);
        }
        Message::Pushdown(m) => {
            if m.fds.is_empty() || m.fds.len() > MAX_PUSHDOWN_FDS {
                return Err(WireError::BadFdCount(m.fds.len() as u8));
            }
            if m.scratch.len() > MAX_SCRATCH_LEN {
                return Err(WireError::ScratchTooLarge(m.scratch.len() as u32));
            }
            out.push(MSG_PUSHDOWN);
            put_u64(&mut out, m.request_id);
            put_u32(&mut out, m.function_id);
            out.push(m.fds.len() as u8);
            for fd in &m.fds {
                put_u64(&mut out, fd.inode);
                put_u64(&mut out, fd.version);
            }
            out.push(m.initial_fd);
            put_u64(&mut out, m.offset);
            put_u64(&mut out, m.length);
            put_u32(&mut out, m.scratch.len() as u32);
            out.extend_from_slice(&m.scratch);
        }
        Message::PushdownResp(m) => {
            if (m.status == Status::Ok) != m.scratch.is_some() {
                return Err(WireError::LengthMismatch);
            }
            out.push(MSG_PUSHDOWN_RESP);
            put_u64(&mut out, m.request_id);
            out.push(m.status as u8);
            put_u32(&mut out, m.resubmissions);
            put_u32(&mut out, m.device_reads);
            if let Some(scratch) = &m.scratch {
                if scratch.len() > MAX_SCRATCH_LEN {
                    return Err(WireError::ScratchTooLarge(scratch.len() as u32));
                }
                put_u32(&mut out, scratch.len() as u32);
                out.extend_from_slice(scratch);
            }
        }
    }
    let total = (out.len() - 4) as u32;
    if total > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(total));
    }
    out[..4].copy_from_slice(&total.to_le_bytes());
    Ok(out)
}

/// Decode one frame from the front of `buf`. Returns the message and the
/// number of bytes consumed (`4 + total_len`). `WireError::Truncated` means
/// the buffer does not yet hold a complete frame.
pub fn decode_frame(buf: &[u8]) -> Result<(Message, usize), WireError> {
    if buf.len() < 4 {
        return Err(WireError::Truncated);
    }
    let total = u32::from_le_bytes(buf[..4].try_into().unwrap());
    if total > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(total));
    }
    if total < 1 {
        return Err(WireError::FrameTooShort(total));
    }
    let end = 4 + total as usize;
    if buf.len() < end {
        return Err(WireError::Truncated);
    }
    let msg_type = buf[4];
    let mut r = Reader::new(&buf[5..end]);
    let msg = match msg_type {
        MSG_READ => {
            let m = ReadCapsule {
                request_id: r.u64()?,
                inode: r.u64()?,
                expected_version: r.u64()?,
                offset: r.u64()?,
                length: r.u64()?,
            };
            r.done()?;
            Message::Read(m)
        }
        MSG_READ_RESP => {
            let request_id = r.u64()?;
            let status = Status::from_u8(r.u8()?)?;
            let data_len = r.u32()?;
            let data = r.bytes(data_len as usize)?.to_vec();
            if status != Status::Ok && !data.is_empty() {
                return Err(WireError::DataOnError);
            }
            r.done()?;
            Message::ReadResp(ReadResponse {
                request_id,
                status,
                data,
            })
        }
        MSG_PUSHDOWN => {
            let request_id = r.u64()?;
            let function_id = r.u32()?;
            let fd_count = r.u8()?;
            if fd_count == 0 || fd_count as usize > MAX_PUSHDOWN_FDS {
                return Err(WireError::BadFdCount(fd_count));
            }
            let mut fds = Vec::with_capacity(fd_count as usize);
            for _ in 0..fd_count {
                fds.push(FdVersion {
                    inode: r.u64()?,
                    version: r.u64()?,
                });
            }
            let initial_fd = r.u8()?;
            let offset = r.u64()?;
            let length = r.u64()?;
            let scratch_len = r.u32()?;
            if scratch_len as usize > MAX_SCRATCH_LEN {
                return Err(WireError::ScratchTooLarge(scratch_len));
            }
            let scratch = r.bytes(scratch_len as usize)?.to_vec();
            r.done()?;
            Message::Pushdown(PushdownCapsule {
                request_id,
                function_id,
                fds,
                initial_fd,
                offset,
                length,
                scratch,
            })
        }
        MSG_PUSHDOWN_RESP => {
            let request_id = r.u64()?;
            let status = Status::from_u8(r.u8()?)?;
            let resubmissions = r.u32()?;
            let device_reads = r.u32()?;
            let scratch = if status == Status::Ok {
                let scratch_len = r.u32()?;
                if scratch_len as usize > MAX_SCRATCH_LEN {
                    return Err(WireError::ScratchTooLarge(scratch_len));
                }
                Some(r.bytes(scratch_len as usize)?.to_vec())
            } else {
                None
            };
            r.done()?;
            Message::PushdownResp(PushdownResponse {
                request_id,
                status,
                resubmissions,
                device_reads,
                scratch,
            })
        }
        other => return Err(WireError::UnknownMessageType(other)),
    };
    Ok((msg, end))
}

/// Read one frame from a stream. `Ok(None)` on clean EOF at a frame
/// boundary.
pub fn read_message<R: Read>(r: &mut R) -> io::Result<Option<Message>> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let total = u32::from_le_bytes(len_buf);
    if !(1..=MAX_FRAME_LEN).contains(&total) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            WireError::FrameTooLarge(total).to_string(),
        ));
    }
    let mut frame = vec![0u8; 4 + total as usize];
    frame[..4].copy_from_slice(&len_buf);
    r.read_exact(&mut frame[4..])?;
    let (msg, consumed) = decode_frame(&frame)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    debug_assert_eq!(consumed, frame.len());
    Ok(Some(msg))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    let frame = encode_frame(msg)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    w.write_all(&frame)
}

pub fn encode_sync_record(rec: &SyncRecord) -> Result<Vec<u8>, WireError> {
    if rec.extents.len() as u32 > MAX_SYNC_EXTENTS {
        return Err(WireError::TooManyExtents(rec.extents.len() as u32));
    }
    let mut out = Vec::with_capacity(32 + rec.extents.len() * 20);
    put_u32(&mut out, SYNC_RECORD_MAGIC);
    put_u64(&mut out, rec.inode);
    put_u64(&mut out, rec.version);
    put_u64(&mut out, rec.file_length);
    put_u32(&mut out, rec.extents.len() as u32);
    for e in &rec.extents {
        put_u64(&mut out, e.file_offset);
        put_u64(&mut out, e.device_block);
        put_u32(&mut out, e.length_blocks);
    }
    Ok(out)
}

/// Decode a sync record from the front of `buf`; returns bytes consumed.
pub fn decode_sync_record(buf: &[u8]) -> Result<(SyncRecord, usize), WireError> {
    let mut r = Reader::new(buf);
    let magic = r.u32()?;
    if magic != SYNC_RECORD_MAGIC {
        return Err(WireError::BadMagic {
            expected: SYNC_RECORD_MAGIC,
            got: magic,
        });
    }
    let inode = r.u64()?;
    let version = r.u64()?;
    let file_length = r.u64()?;
    let count = r.u32()?;
    if count > MAX_SYNC_EXTENTS {
        return Err(WireError::TooManyExtents(count));
    }
    // Bound the allocation by what the buffer can actually hold.
    if buf.len().saturating_sub(r.pos) < count as usize * 20 {
        return Err(WireError::Truncated);
    }
    let mut extents = Vec::with_capacity(count as usize);
    for _ in 0..count {
        extents.push(Extent {
            file_offset: r.u64()?,
            device_block: r.u64()?,
            length_blocks: r.u32()?,
        });
    }
    Ok((
        SyncRecord {
            inode,
            version,
            file_length,
            extents,
        },
        r.pos,
    ))
}

pub fn encode_sync_ack(ack: &SyncAck) -> Vec<u8> {
    let mut out = Vec::with_capacity(20);
    put_u32(&mut out, SYNC_ACK_MAGIC);
    put_u64(&mut out, ack.inode);
    put_u64(&mut out, ack.version);
    out
}

pub fn decode_sync_ack(buf: &[u8]) -> Result<(SyncAck, usize), WireError> {
    let mut r = Reader::new(buf);
    let magic = r.u32()?;
    if magic != SYNC_ACK_MAGIC {
        return Err(WireError::BadMagic {
            expected: SYNC_ACK_MAGIC,
            got: magic,
        });
    }
    let ack = SyncAck {
        inode: r.u64()?,
        version: r.u64()?,
    };
    Ok((ack, r.pos))
}

/// Read one sync record from a stream (fixed 32-byte header, then the extent
/// array). `Ok(None)` on clean EOF at a record boundary.
pub fn read_sync_record<R: Read>(r: &mut R) -> io::Result<Option<SyncRecord>> {
    let mut head = [0u8; 32];
    match r.read_exact(&mut head[..4]) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    r.read_exact(&mut head[4..])?;
    let count = u32::from_le_bytes(head[28..32].try_into().unwrap());
    if count > MAX_SYNC_EXTENTS {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            WireError::TooManyExtents(count).to_string(),
        ));
    }
    let mut body = vec![0u8; count as usize * 20];
    r.read_exact(&mut body)?;
    let mut full = head.to_vec();
    full.extend_from_slice(&body);
    let (rec, consumed) = decode_sync_record(&full)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    debug_assert_eq!(consumed, full.len());
    Ok(Some(rec))
}

pub fn read_sync_ack<R: Read>(r: &mut R) -> io::Result<SyncAck> {
    let mut buf = [0u8; 20];
    r.read_exact(&mut buf)?;
    decode_sync_ack(&buf)
        .map(|(a, _)| a)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}
