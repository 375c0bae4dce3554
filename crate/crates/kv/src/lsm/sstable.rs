//! Sorted-table files on the extent store.
//!
//! Layout: data blocks at fixed strides, then the index block, then the
//! optional Bloom filter, then zero padding so the 40-byte footer lands
//! flush with the end of the (block-aligned) file. Index handles carry the
//! exact byte length of each data block, so the stride padding is never
//! parsed. Keys are u64s stored big-endian, which makes byte order and
//! numeric order agree.

use std::sync::Arc;

use pushdown_core::formats::sst::{
    block_entries, BlockBuilder, BlockHandle, BloomFilter, Footer, FOOTER_LEN,
};
use pushdown_core::store::{ExtentStore, FileHandle};

use super::LsmError;

pub fn key_bytes(key: u64) -> [u8; 8] {
    key.to_be_bytes()
}

pub fn key_from_bytes(bytes: &[u8]) -> Result<u64, LsmError> {
    let arr: [u8; 8] = bytes
        .try_into()
        .map_err(|_| LsmError::Corrupt("key is not 8 bytes"))?;
    Ok(u64::from_be_bytes(arr))
}

#[derive(Clone, Copy, Debug)]
pub struct SstWriteOpts {
    /// Target data block payload; also the placement stride.
    pub block_bytes: usize,
    /// 0 disables the filter.
    pub bloom_bits_per_key: u32,
    /// Keep the decoded index resident in the table descriptor.
    pub pin_index: bool,
}

impl Default for SstWriteOpts {
    fn default() -> Self {
        SstWriteOpts { block_bytes: 4096, bloom_bits_per_key: 0, pin_index: true }
    }
}

/// An immutable table known to this process. Holding the descriptor keeps
/// the file's blocks allocated (via the open file handle) even after the
/// file is unlinked by a later compaction.
pub struct SstTable {
    pub inode: u64,
    pub n_entries: u64,
    pub min_key: u64,
    pub max_key: u64,
    pub index_handle: BlockHandle,
    /// (last key of block, handle) per data block, when pinned at build.
    pub index: Option<Vec<(u64, BlockHandle)>>,
    pub bloom: Option<BloomFilter>,
    pub file_len: u64,
    handle: FileHandle,
}

impl SstTable {
    pub fn handle(&self) -> &FileHandle {
        &self.handle
    }

    /// Local (host-side) read of one block, used at build/open/compaction
    /// time — never on the benchmarked query path.
    fn read_block_local(&self, h: BlockHandle) -> Result<Vec<u8>, LsmError> {
        Ok(self
            .handle
            .store()
            .read_local(self.inode, h.offset, h.length as u64)?)
    }

    /// Decode the pinned index, or fetch and decode it locally.
    pub fn index_entries(&self) -> Result<Vec<(u64, BlockHandle)>, LsmError> {
        if let Some(index) = &self.index {
            return Ok(index.clone());
        }
        let block = self.read_block_local(self.index_handle)?;
        decode_index(&block)
    }

    /// Every entry in key order; tombstones included. Compaction input.
    pub fn entries(&self) -> Result<Vec<(u64, Option<Vec<u8>>)>, LsmError> {
        let mut out = Vec::with_capacity(self.n_entries as usize);
        for (_, handle) in self.index_entries()? {
            let block = self.read_block_local(handle)?;
            for (k, v) in block_entries(&block)? {
                out.push((key_from_bytes(&k)?, v));
            }
        }
        Ok(out)
    }

    /// Re-open a table written earlier (footer → index → min key).
    pub fn open(store: &Arc<ExtentStore>, inode: u64, pin_index: bool) -> Result<Arc<SstTable>, LsmError> {
        let handle = store.open(inode)?;
        let file_len = handle.file_length()?;
        if file_len < FOOTER_LEN as u64 {
            return Err(LsmError::Corrupt("file shorter than footer"));
        }
        let footer_bytes = store.read_local(inode, file_len - FOOTER_LEN as u64, FOOTER_LEN as u64)?;
        let footer = Footer::decode(&footer_bytes)?;
        let index_block = store.read_local(inode, footer.index.offset, footer.index.length as u64)?;
        let index = decode_index(&index_block)?;
        let (&(max_key, _), &(_, first_handle)) = match (index.last(), index.first()) {
            (Some(l), Some(f)) => (l, f),
            _ => return Err(LsmError::Corrupt("empty index")),
        };
        let first_block = store.read_local(inode, first_handle.offset, first_handle.length as u64)?;
        let min_key = match block_entries(&first_block)?.first() {
            Some((k, _)) => key_from_bytes(k)?,
            None => return Err(LsmError::Corrupt("empty first block")),
        };
        let bloom = match footer.filter {
            Some(h) => {
                let bytes = store.read_local(inode, h.offset, h.length as u64)?;
                Some(BloomFilter::decode(&bytes)?)
            }
            None => None,
        };
        Ok(Arc::new(SstTable {
            inode,
            n_entries: footer.n_entries,
            min_key,
            max_key,
            index_handle: footer.index,
            index: pin_index.then_some(index),
            bloom,
            file_len,
            handle,
        }))
    }
}

fn decode_index(block: &[u8]) -> Result<Vec<(u64, BlockHandle)>, LsmError> {
    pushdown_core::formats::sst::index_entries(block)?
        .into_iter()
        .map(|(k, h)| Ok((key_from_bytes(&k)?, h)))
        .collect()
}

/// Write `entries` (strictly ascending keys, tombstones as `None`) as one
/// table file and return its descriptor. The caller owns making the new
/// file's extent map known to the target.
pub fn write_sst(
    store: &Arc<ExtentStore>,
    name: &str,
    entries: &[(u64, Option<Vec<u8>>)],
    opts: &SstWriteOpts,
) -> Result<Arc<SstTable>, LsmError> {
    assert!(!entries.is_empty(), "refusing to write an empty table");
    let stride = opts.block_bytes;
    let mut file: Vec<u8> = Vec::new();
    let mut index: Vec<(u64, BlockHandle)> = Vec::new();

    let mut block = BlockBuilder::new();
    let mut block_at = 0u64;
    let finish_block =
        |file: &mut Vec<u8>, index: &mut Vec<(u64, BlockHandle)>, b: BlockBuilder, at: u64| {
            let last = key_from_bytes(b.last_key()).expect("builder keys are 8 bytes");
            let bytes = b.finish();
            index.push((last, BlockHandle { offset: at, length: bytes.len() as u32 }));
            file.extend_from_slice(&bytes);
            let padded = file.len().next_multiple_of(stride);
            file.resize(padded, 0);
        };

    for (key, value) in entries {
        let entry_len = 2 + 8 + 4 + value.as_ref().map_or(0, |v| v.len());
        if !block.is_empty() && block.estimated_len() + entry_len > stride {
            let full = std::mem::take(&mut block);
            finish_block(&mut file, &mut index, full, block_at);
            block_at = file.len() as u64;
        }
        block.add(&key_bytes(*key), value.as_deref());
    }
    finish_block(&mut file, &mut index, block, block_at);

    let mut index_block = BlockBuilder::new();
    for (last, handle) in &index {
        index_block.add(&key_bytes(*last), Some(&handle.encode()));
    }
    let index_bytes = index_block.finish();
    let index_handle =
        BlockHandle { offset: file.len() as u64, length: index_bytes.len() as u32 };
    file.extend_from_slice(&index_bytes);

    let bloom = (opts.bloom_bits_per_key > 0).then(|| {
        let keys: Vec<[u8; 8]> = entries.iter().map(|(k, _)| key_bytes(*k)).collect();
        BloomFilter::build(
            keys.iter().map(|k| k.as_slice()),
            keys.len(),
            opts.bloom_bits_per_key,
        )
    });
    let filter_handle = bloom.as_ref().map(|b| {
        let bytes = b.encode();
        let h = BlockHandle { offset: file.len() as u64, length: bytes.len() as u32 };
        file.extend_from_slice(&bytes);
        h
    });

    let footer = Footer {
        index: index_handle,
        filter: filter_handle,
        n_entries: entries.len() as u64,
    };
    let block_size = store.block_size() as usize;
    let total = (file.len() + FOOTER_LEN).next_multiple_of(block_size);
    file.resize(total - FOOTER_LEN, 0);
    file.extend_from_slice(&footer.encode());

    let inode = store.create_file(name)?;
    store.append(inode, &file)?;
    let handle = store.open(inode)?;

    Ok(Arc::new(SstTable {
        inode,
        n_entries: entries.len() as u64,
        min_key: entries[0].0,
        max_key: entries[entries.len() - 1].0,
        index_handle,
        index: opts.pin_index.then_some(index),
        bloom,
        file_len: file.len() as u64,
        handle,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pushdown_core::block::BlockDevice;
    use pushdown_core::store::StoreConfig;

    fn mem_store() -> Arc<ExtentStore> {
        let device = Arc::new(BlockDevice::memory(512, 1 << 15));
        ExtentStore::new(device, StoreConfig::default())
    }

    fn sample_entries(n: u64) -> Vec<(u64, Option<Vec<u8>>)> {
        (0..n)
            .map(|i| {
                let k = i * 7;
                if i % 5 == 4 {
                    (k, None)
                } else {
                    (k, Some(format!("value-{k:08}").into_bytes()))
                }
            })
            .collect()
    }

    #[test]
    fn write_then_reopen_preserves_everything() {
        let store = mem_store();
        let entries = sample_entries(2000);
        let opts = SstWriteOpts { bloom_bits_per_key: 10, ..Default::default() };
        let built = write_sst(&store, "t0", &entries, &opts).unwrap();
        assert_eq!(built.min_key, 0);
        assert_eq!(built.max_key, 1999 * 7);
        assert_eq!(built.n_entries, 2000);
        assert!(built.index.as_ref().unwrap().len() > 1, "should span several blocks");
        assert_eq!(built.entries().unwrap(), entries);

        let reopened = SstTable::open(&store, built.inode, false).unwrap();
        assert_eq!(reopened.min_key, built.min_key);
        assert_eq!(reopened.max_key, built.max_key);
        assert_eq!(reopened.n_entries, built.n_entries);
        assert!(reopened.index.is_none());
        assert_eq!(reopened.entries().unwrap(), entries);
        assert!(reopened.bloom.as_ref().unwrap().contains(&key_bytes(7)));
    }

    #[test]
    fn data_blocks_sit_on_strides_with_exact_lengths() {
        let store = mem_store();
        let built = write_sst(&store, "t", &sample_entries(3000), &SstWriteOpts::default())
            .unwrap();
        let index = built.index.as_ref().unwrap();
        for (i, (_, h)) in index.iter().enumerate() {
            assert_eq!(h.offset % 4096, 0, "block {i} not stride aligned");
            assert!(h.length as usize <= 4096);
            // Exact length: the block must parse on its own.
            let bytes = store
                .read_local(built.inode, h.offset, h.length as u64)
                .unwrap();
            assert!(!block_entries(&bytes).unwrap().is_empty());
        }
        assert_eq!(built.file_len % 512, 0, "file must be block aligned");
    }

    #[test]
    fn single_entry_table() {
        let store = mem_store();
        let entries = vec![(42u64, Some(b"v".to_vec()))];
        let t = write_sst(&store, "one", &entries, &SstWriteOpts::default()).unwrap();
        assert_eq!((t.min_key, t.max_key), (42, 42));
        assert_eq!(t.entries().unwrap(), entries);
    }
}
