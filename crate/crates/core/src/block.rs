//! Fixed-geometry block devices.
//!
//! A [`BlockDevice`] is a flat array of fixed-size blocks addressed by block
//! index. All transfers are whole blocks; byte-granular slicing happens in
//! higher layers. Two backings exist: an in-memory buffer for tests and
//! embedded benchmarks, and a plain file so a host and a target process can
//! share one device image.

use std::fs::OpenOptions;
use std::io;
use std::os::unix::fs::FileExt;
use std::path::Path;

use parking_lot::RwLock;

#[derive(Debug, thiserror::Error)]
pub enum DeviceError {
    #[error("block range {block}+{count} out of bounds (capacity {capacity} blocks)")]
    OutOfBounds { block: u64, count: u64, capacity: u64 },
    #[error("transfer of {len} bytes is not a whole number of {block_size}-byte blocks")]
    Misaligned { len: usize, block_size: u32 },
    #[error("device i/o: {0}")]
    Io(#[from] io::Error),
}

enum Backing {
    Memory(RwLock<Vec<u8>>),
    File(std::fs::File),
}

pub struct BlockDevice {
    backing: Backing,
    block_size: u32,
    capacity_blocks: u64,
}

impl BlockDevice {
    /// In-memory device, zero-filled.
    pub fn memory(block_size: u32, capacity_blocks: u64) -> Self {
        assert!(block_size > 0, "block size must be positive");
        let bytes = (block_size as u64 * capacity_blocks) as usize;
        BlockDevice {
            backing: Backing::Memory(RwLock::new(vec![0u8; bytes])),
            block_size,
            capacity_blocks,
        }
    }

    /// File-backed device. Creates the file if missing and extends it to the
    /// full capacity so reads of never-written blocks return zeroes.
    pub fn file(path: &Path, block_size: u32, capacity_blocks: u64) -> Result<Self, DeviceError> {
        assert!(block_size > 0, "block size must be positive");
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let want = block_size as u64 * capacity_blocks;
        if file.metadata()?.len() < want {
            file.set_len(want)?;
        }
        Ok(BlockDevice {
            backing: Backing::File(file),
            block_size,
            capacity_blocks,
        })
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.capacity_blocks
    }

    fn check(&self, block: u64, len: usize) -> Result<(), DeviceError> {
        let bs = self.block_size as usize;
        if len == 0 || !len.is_multiple_of(bs) {
            return Err(DeviceError::Misaligned {
                len,
                block_size: self.block_size,
            });
        }
        let count = (len / bs) as u64;
        if block.checked_add(count).is_none_or(|end| end > self.capacity_blocks) {
            return Err(DeviceError::OutOfBounds {
                block,
                count,
                capacity: self.capacity_blocks,
            });
        }
        Ok(())
    }

    pub fn read_into(&self, block: u64, buf: &mut [u8]) -> Result<(), DeviceError> {
        self.check(block, buf.len())?;
        let off = block * self.block_size as u64;
        match &self.backing {
            Backing::Memory(mem) => {
                let mem = mem.read();
                buf.copy_from_slice(&mem[off as usize..off as usize + buf.len()]);
            }
            Backing::File(f) => f.read_exact_at(buf, off)?,
        }
        Ok(())
    }

    pub fn read_blocks(&self, block: u64, count: u32) -> Result<Vec<u8>, DeviceError> {
        let mut buf = vec![0u8; count as usize * self.block_size as usize];
        self.read_into(block, &mut buf)?;
        Ok(buf)
    }

    pub fn write_blocks(&self, block: u64, data: &[u8]) -> Result<(), DeviceError> {
        self.check(block, data.len())?;
        let off = block * self.block_size as u64;
        match &self.backing {
            Backing::Memory(mem) => {
                let mut mem = mem.write();
                mem[off as usize..off as usize + data.len()].copy_from_slice(data);
            }
            Backing::File(f) => f.write_all_at(data, off)?,
        }
        Ok(())
    }
}
