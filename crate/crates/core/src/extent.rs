//! Extent maps: the file-offset → device-block translation tables.
//!
//! An [`ExtentMap`] is an immutable snapshot of one file's layout, stamped
//! with a version that increments on every layout mutation. The host keeps
//! the authoritative map per file; the target holds replicas shipped over
//! the metadata channel and refuses requests whose version does not match.
//! Because maps are immutable and shared via `Arc`, a request can pin the
//! exact snapshot it was validated against for its whole lifetime.

/// One contiguous run of device blocks backing a contiguous byte range of a
/// file. `file_offset` is in bytes; `device_block` and `length_blocks` are in
/// device blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extent {
    pub file_offset: u64,
    pub device_block: u64,
    pub length_blocks: u32,
}

impl Extent {
    pub fn byte_len(&self, block_size: u32) -> u64 {
        self.length_blocks as u64 * block_size as u64
    }
}

/// A contiguous run of device blocks produced by translation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRange {
    pub device_block: u64,
    pub blocks: u32,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MapError {
    #[error("byte range {offset}+{length} exceeds file length {file_length}")]
    OutOfRange {
        offset: u64,
        length: u64,
        file_length: u64,
    },
    #[error("byte range {offset}+{length} is not block-aligned")]
    Misaligned { offset: u64, length: u64 },
    #[error("malformed extent map: {0}")]
    Invalid(&'static str),
}

/// Immutable snapshot of one file's layout at a specific version.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtentMap {
    pub inode: u64,
    pub version: u64,
    /// Bytes; always a whole number of blocks.
    pub file_length: u64,
    /// Sorted by `file_offset`, gap-free, covering exactly `[0, file_length)`.
    pub extents: Vec<Extent>,
}

impl ExtentMap {
    pub fn empty(inode: u64, version: u64) -> Self {
        ExtentMap {
            inode,
            version,
            file_length: 0,
            extents: Vec::new(),
        }
    }

    /// Structural invariants every map must satisfy, also enforced on the
    /// target before a replica is accepted: extents sorted by file offset,
    /// gap-free from zero, jointly covering exactly `file_length` bytes, with
    /// no zero-length runs and no device-address overflow.
    pub fn validate(&self, block_size: u32) -> Result<(), MapError> {
        if block_size == 0 {
            return Err(MapError::Invalid("zero block size"));
        }
        if !self.file_length.is_multiple_of(block_size as u64) {
            return Err(MapError::Invalid("file length not block-aligned"));
        }
        let mut next = 0u64;
        for e in &self.extents {
            if e.length_blocks == 0 {
                return Err(MapError::Invalid("zero-length extent"));
            }
            if e.file_offset != next {
                return Err(MapError::Invalid("extents not contiguous from zero"));
            }
            if e.device_block
                .checked_add(e.length_blocks as u64)
                .is_none()
            {
                return Err(MapError::Invalid("device address overflow"));
            }
            next = next
                .checked_add(e.byte_len(block_size))
                .ok_or(MapError::Invalid("file offset overflow"))?;
        }
        if next != self.file_length {
            return Err(MapError::Invalid("extents do not cover file length"));
        }
        Ok(())
    }

    /// Translate a block-aligned byte range into device block runs, one
    /// [`BlockRange`] per extent crossed. Adjacent extents are stored merged
    /// when device-contiguous, so a multi-range result always means the span
    /// is physically discontiguous.
    pub fn lookup(
        &self,
        offset: u64,
        length: u64,
        block_size: u32,
    ) -> Result<Vec<BlockRange>, MapError> {
        let bs = block_size as u64;
        if !offset.is_multiple_of(bs) || !length.is_multiple_of(bs) {
            return Err(MapError::Misaligned { offset, length });
        }
        if length == 0 {
            return Ok(Vec::new());
        }
        let end = offset
            .checked_add(length)
            .ok_or(MapError::OutOfRange {
                offset,
                length,
                file_length: self.file_length,
            })?;
        if end > self.file_length {
            return Err(MapError::OutOfRange {
                offset,
                length,
                file_length: self.file_length,
            });
        }
        // First extent whose end is past `offset`.
        let mut idx = self
            .extents
            .partition_point(|e| e.file_offset + e.byte_len(block_size) <= offset);
        let mut ranges = Vec::new();
        let mut cur = offset;
        while cur < end {
            let e = self
                .extents
                .get(idx)
                .ok_or(MapError::Invalid("lookup ran past extent list"))?;
            let within = cur - e.file_offset;
            let take = (e.byte_len(block_size) - within).min(end - cur);
            ranges.push(BlockRange {
                device_block: e.device_block + within / bs,
                blocks: (take / bs) as u32,
            });
            cur += take;
            idx += 1;
        }
        Ok(ranges)
    }
}
