//! Host-side authoritative file layer.
//!
//! [`ExtentStore`] owns the block allocator and the per-file extent maps.
//! Files are append-only at the data level; layout mutations are `append`,
//! `remap` (relocate every block, preserving contents), `truncate`, and
//! `delete_file`. Every mutation installs a fresh immutable [`ExtentMap`]
//! snapshot with a bumped version and notifies the registered change
//! listener, which is how the metadata synchronizer learns what to ship.
//!
//! Deletion is refcount-deferred: while any [`FileHandle`] is open the
//! blocks stay allocated and readable, so an in-flight remote request that
//! already pinned the file's map keeps operating on intact data. The blocks
//! return to the allocator when the last handle drops.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{BlockDevice, DeviceError};
use crate::extent::{Extent, ExtentMap, MapError};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown inode {0}")]
    UnknownInode(u64),
    #[error("inode {0} already deleted")]
    AlreadyDeleted(u64),
    #[error("file name {0:?} already exists")]
    NameExists(String),
    #[error("device full: wanted {wanted} blocks, {free} free")]
    DeviceFull { wanted: u64, free: u64 },
    #[error("append length {len} is not a positive multiple of the block size {block_size}")]
    BadAppend { len: usize, block_size: u32 },
    #[error("truncate length {new_len} invalid for file of {file_length} bytes")]
    BadTruncate { new_len: u64, file_length: u64 },
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Receives the inode of every file whose layout just changed. Installed by
/// the metadata synchronizer; invoked outside store locks.
pub trait ChangeListener: Send + Sync {
    fn file_changed(&self, inode: u64);
}

#[derive(Clone, Debug, Default)]
pub struct StoreConfig {
    /// Probability that the allocator artificially cuts an allocation run
    /// short, forcing multi-extent files. Zero in production use; raised in
    /// tests that need physically fragmented layouts.
    pub fragment_probability: f64,
    pub fragment_seed: u64,
}

/// Free-list allocator over device blocks: start → run length, coalesced.
struct Allocator {
    free: BTreeMap<u64, u64>,
    free_blocks: u64,
}

impl Allocator {
    fn new(capacity_blocks: u64) -> Self {
        let mut free = BTreeMap::new();
        if capacity_blocks > 0 {
            free.insert(0, capacity_blocks);
        }
        Allocator {
            free,
            free_blocks: capacity_blocks,
        }
    }

    /// Allocate `want` blocks as one or more runs. `limit` may cap each run
    /// (the fragmentation knob); allocation is atomic — on shortage nothing
    /// is taken.
    fn alloc(&mut self, want: u64, mut limit: impl FnMut(u64) -> u64) -> Option<Vec<(u64, u64)>> {
        if want > self.free_blocks {
            return None;
        }
        let mut runs: Vec<(u64, u64)> = Vec::new();
        let mut remaining = want;
        while remaining > 0 {
            let (&start, &len) = self.free.iter().next().expect("free space accounted for");
            let cap = len.min(remaining);
            let take = limit(cap).clamp(1, cap);
            self.free.remove(&start);
            // A limiter-truncated piece is carved from the run's tail so the
            // next piece (from the head) cannot be device-adjacent to it —
            // otherwise first-fit would glue the pieces straight back.
            let piece = if take < cap { start + len - take } else { start };
            if take < len {
                let rest = if piece == start { start + take } else { start };
                self.free.insert(rest, len - take);
            }
            self.free_blocks -= take;
            remaining -= take;
            match runs.last_mut() {
                Some((s, l)) if *s + *l == piece => *l += take,
                _ => runs.push((piece, take)),
            }
        }
        Some(runs)
    }

    fn release(&mut self, start: u64, len: u64) {
        if len == 0 {
            return;
        }
        debug_assert!(
            !self
                .free
                .range(..start + len)
                .next_back()
                .is_some_and(|(&s, &l)| s + l > start),
            "double free of blocks {start}+{len}"
        );
        self.free_blocks += len;
        let mut start = start;
        let mut len = len;
        if let Some((&s, &l)) = self.free.range(..start).next_back() {
            if s + l == start {
                self.free.remove(&s);
                start = s;
                len += l;
            }
        }
        if let Some(&l) = self.free.get(&(start + len)) {
            self.free.remove(&(start + len));
            len += l;
        }
        self.free.insert(start, len);
    }
}

struct FileState {
    map: Arc<ExtentMap>,
    name: Option<String>,
    handles: u32,
    deleted: bool,
}

struct Inner {
    files: HashMap<u64, FileState>,
    names: HashMap<String, u64>,
    alloc: Allocator,
    next_inode: u64,
    rng: ChaCha8Rng,
    fragment_probability: f64,
}

pub struct ExtentStore {
    device: Arc<BlockDevice>,
    inner: Mutex<Inner>,
    listener: RwLock<Option<Arc<dyn ChangeListener>>>,
}

impl ExtentStore {
    pub fn new(device: Arc<BlockDevice>, config: StoreConfig) -> Arc<Self> {
        let alloc = Allocator::new(device.capacity_blocks());
        Arc::new(ExtentStore {
            device,
            inner: Mutex::new(Inner {
                files: HashMap::new(),
                names: HashMap::new(),
                alloc,
                next_inode: 1,
                rng: ChaCha8Rng::seed_from_u64(config.fragment_seed),
                fragment_probability: config.fragment_probability,
            }),
            listener: RwLock::new(None),
        })
    }

    pub fn set_change_listener(&self, listener: Arc<dyn ChangeListener>) {
        *self.listener.write() = Some(listener);
    }

    fn notify(&self, inode: u64) {
        if let Some(l) = self.listener.read().clone() {
            l.file_changed(inode);
        }
    }

    pub fn device(&self) -> &Arc<BlockDevice> {
        &self.device
    }

    pub fn block_size(&self) -> u32 {
        self.device.block_size()
    }

    pub fn free_blocks(&self) -> u64 {
        self.inner.lock().alloc.free_blocks
    }

    pub fn create_file(&self, name: &str) -> Result<u64, StoreError> {
        let inode;
        {
            let mut inner = self.inner.lock();
            if inner.names.contains_key(name) {
                return Err(StoreError::NameExists(name.to_string()));
            }
            inode = inner.next_inode;
            inner.next_inode += 1;
            inner.names.insert(name.to_string(), inode);
            inner.files.insert(
                inode,
                FileState {
                    map: Arc::new(ExtentMap::empty(inode, 1)),
                    name: Some(name.to_string()),
                    handles: 0,
                    deleted: false,
                },
            );
        }
        self.notify(inode);
        Ok(inode)
    }

    pub fn inode_by_name(&self, name: &str) -> Option<u64> {
        self.inner.lock().names.get(name).copied()
    }

    fn live(inner: &mut Inner, inode: u64) -> Result<&mut FileState, StoreError> {
        match inner.files.get_mut(&inode) {
            None => Err(StoreError::UnknownInode(inode)),
            Some(f) if f.deleted => Err(StoreError::AlreadyDeleted(inode)),
            Some(f) => Ok(f),
        }
    }

    /// Append whole blocks to the file, allocating space and writing the
    /// data. Returns the new file length.
    pub fn append(&self, inode: u64, data: &[u8]) -> Result<u64, StoreError> {
        let bs = self.device.block_size();
        if data.is_empty() || !data.len().is_multiple_of(bs as usize) {
            return Err(StoreError::BadAppend {
                len: data.len(),
                block_size: bs,
            });
        }
        let want = (data.len() / bs as usize) as u64;
        let new_len;
        {
            let mut inner = self.inner.lock();
            let frag = inner.fragment_probability;
            let mut rng = inner.rng.clone();
            let runs = inner
                .alloc
                .alloc(want, |max| fragment_limit(&mut rng, frag, max))
                .ok_or(StoreError::DeviceFull {
                    wanted: want,
                    free: inner.alloc.free_blocks,
                })?;
            inner.rng = rng;
            let file = match Self::live(&mut inner, inode) {
                Ok(f) => f,
                Err(e) => {
                    // Undo the allocation; the file vanished.
                    for (s, l) in runs {
                        inner.alloc.release(s, l);
                    }
                    return Err(e);
                }
            };
            let mut map = (*file.map).clone();
            let mut data_pos = 0usize;
            for (start, len) in &runs {
                let bytes = (*len * bs as u64) as usize;
                self.device
                    .write_blocks(*start, &data[data_pos..data_pos + bytes])?;
                data_pos += bytes;
                match map.extents.last_mut() {
                    // Keep extents maximal: merge device-contiguous runs.
                    Some(last)
                        if last.device_block + last.length_blocks as u64 == *start
                            && last.length_blocks as u64 + len <= u32::MAX as u64 =>
                    {
                        last.length_blocks += *len as u32;
                    }
                    _ => map.extents.push(Extent {
                        file_offset: map.file_length + (data_pos - bytes) as u64,
                        device_block: *start,
                        length_blocks: *len as u32,
                    }),
                }
            }
            map.file_length += data.len() as u64;
            map.version += 1;
            new_len = map.file_length;
            debug_assert!(map.validate(bs).is_ok());
            let file = Self::live(&mut inner, inode).expect("checked above");
            file.map = Arc::new(map);
        }
        self.notify(inode);
        Ok(new_len)
    }

    /// Relocate every block of the file to fresh device locations, preserving
    /// contents and length. This is the layout churn a defragmenter or
    /// copying garbage collector produces.
    pub fn remap(&self, inode: u64) -> Result<(), StoreError> {
        let bs = self.device.block_size();
        {
            let mut inner = self.inner.lock();
            let old_map = Self::live(&mut inner, inode)?.map.clone();
            let want = old_map.file_length / bs as u64;
            if want == 0 {
                let file = Self::live(&mut inner, inode)?;
                let mut map = (*file.map).clone();
                map.version += 1;
                file.map = Arc::new(map);
            } else {
                let frag = inner.fragment_probability;
                let mut rng = inner.rng.clone();
                let runs = inner
                    .alloc
                    .alloc(want, |max| fragment_limit(&mut rng, frag, max))
                    .ok_or(StoreError::DeviceFull {
                        wanted: want,
                        free: inner.alloc.free_blocks,
                    })?;
                inner.rng = rng;
                // Copy old contents into the new runs.
                let copy = || -> Result<Vec<Extent>, StoreError> {
                    let mut new_extents = Vec::new();
                    let mut file_off = 0u64;
                    for (start, len) in &runs {
                        new_extents.push(Extent {
                            file_offset: file_off,
                            device_block: *start,
                            length_blocks: *len as u32,
                        });
                        for i in 0..*len {
                            let src = old_map.lookup(file_off, bs as u64, bs)?[0].device_block;
                            let buf = self.device.read_blocks(src, 1)?;
                            self.device.write_blocks(start + i, &buf)?;
                            file_off += bs as u64;
                        }
                    }
                    Ok(new_extents)
                };
                let new_extents = match copy() {
                    Ok(e) => e,
                    Err(e) => {
                        for (s, l) in runs {
                            inner.alloc.release(s, l);
                        }
                        return Err(e);
                    }
                };
                let file = Self::live(&mut inner, inode)?;
                let old = file.map.clone();
                let map = ExtentMap {
                    inode,
                    version: old.version + 1,
                    file_length: old.file_length,
                    extents: merge_extents(new_extents),
                };
                debug_assert!(map.validate(bs).is_ok());
                file.map = Arc::new(map);
                for e in &old.extents {
                    inner.alloc.release(e.device_block, e.length_blocks as u64);
                }
            }
        }
        self.notify(inode);
        Ok(())
    }

    /// Shrink the file to `new_len` bytes (block-aligned), releasing the tail.
    pub fn truncate(&self, inode: u64, new_len: u64) -> Result<(), StoreError> {
        let bs = self.device.block_size() as u64;
        {
            let mut inner = self.inner.lock();
            let file = Self::live(&mut inner, inode)?;
            let map = file.map.clone();
            if new_len > map.file_length || !new_len.is_multiple_of(bs) {
                return Err(StoreError::BadTruncate {
                    new_len,
                    file_length: map.file_length,
                });
            }
            let mut kept = Vec::new();
            let mut freed = Vec::new();
            for e in &map.extents {
                let end = e.file_offset + e.byte_len(bs as u32);
                if end <= new_len {
                    kept.push(*e);
                } else if e.file_offset >= new_len {
                    freed.push((e.device_block, e.length_blocks as u64));
                } else {
                    let keep_blocks = ((new_len - e.file_offset) / bs) as u32;
                    kept.push(Extent {
                        length_blocks: keep_blocks,
                        ..*e
                    });
                    freed.push((
                        e.device_block + keep_blocks as u64,
                        (e.length_blocks - keep_blocks) as u64,
                    ));
                }
            }
            let new_map = ExtentMap {
                inode,
                version: map.version + 1,
                file_length: new_len,
                extents: kept,
            };
            debug_assert!(new_map.validate(bs as u32).is_ok());
            file.map = Arc::new(new_map);
            for (s, l) in freed {
                inner.alloc.release(s, l);
            }
        }
        self.notify(inode);
        Ok(())
    }

    /// Remove the file. Blocks are reclaimed immediately if no handles are
    /// open, otherwise when the last handle drops. The name is freed either
    /// way. The version does not change: the surviving snapshot still
    /// describes intact data for requests already in flight.
    pub fn delete_file(&self, inode: u64) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        let file = Self::live(&mut inner, inode)?;
        file.deleted = true;
        if let Some(name) = file.name.take() {
            inner.names.remove(&name);
        }
        let file = inner.files.get(&inode).expect("present");
        if file.handles == 0 {
            let map = file.map.clone();
            inner.files.remove(&inode);
            for e in &map.extents {
                inner.alloc.release(e.device_block, e.length_blocks as u64);
            }
        }
        Ok(())
    }

    pub fn open(self: &Arc<Self>, inode: u64) -> Result<FileHandle, StoreError> {
        let mut inner = self.inner.lock();
        let file = Self::live(&mut inner, inode)?;
        file.handles += 1;
        Ok(FileHandle {
            store: Arc::clone(self),
            inode,
        })
    }

    fn release_handle(&self, inode: u64) {
        let mut inner = self.inner.lock();
        let Some(file) = inner.files.get_mut(&inode) else {
            return;
        };
        file.handles -= 1;
        if file.handles == 0 && file.deleted {
            let map = file.map.clone();
            inner.files.remove(&inode);
            for e in &map.extents {
                inner.alloc.release(e.device_block, e.length_blocks as u64);
            }
        }
    }

    /// Pin the current layout snapshot of a live file.
    pub fn snapshot(&self, inode: u64) -> Result<Arc<ExtentMap>, StoreError> {
        let mut inner = self.inner.lock();
        Ok(Self::live(&mut inner, inode)?.map.clone())
    }

    pub fn current_version(&self, inode: u64) -> Result<u64, StoreError> {
        Ok(self.snapshot(inode)?.version)
    }

    pub fn file_length(&self, inode: u64) -> Result<u64, StoreError> {
        Ok(self.snapshot(inode)?.file_length)
    }

    /// Host-side read through the store's own translation — the maintenance
    /// path used while building and registering files, not the benchmarked
    /// data path. Tolerates arbitrary byte alignment.
    pub fn read_local(&self, inode: u64, offset: u64, length: u64) -> Result<Vec<u8>, StoreError> {
        let map = self.snapshot(inode)?;
        let bs = self.device.block_size() as u64;
        if length == 0 {
            return Ok(Vec::new());
        }
        let start = offset - offset % bs;
        let end = (offset + length).div_ceil(bs) * bs;
        let mut buf = Vec::with_capacity((end - start) as usize);
        for r in map.lookup(start, end - start, bs as u32)? {
            buf.extend_from_slice(&self.device.read_blocks(r.device_block, r.blocks)?);
        }
        let skip = (offset - start) as usize;
        Ok(buf[skip..skip + length as usize].to_vec())
    }

    pub fn list_inodes(&self) -> Vec<u64> {
        let inner = self.inner.lock();
        let mut v: Vec<u64> = inner
            .files
            .iter()
            .filter(|(_, f)| !f.deleted)
            .map(|(&i, _)| i)
            .collect();
        v.sort_unstable();
        v
    }
}

fn merge_extents(extents: Vec<Extent>) -> Vec<Extent> {
    let mut out: Vec<Extent> = Vec::with_capacity(extents.len());
    for e in extents {
        match out.last_mut() {
            Some(last)
                if last.device_block + last.length_blocks as u64 == e.device_block
                    && last.length_blocks as u64 + e.length_blocks as u64 <= u32::MAX as u64 =>
            {
                last.length_blocks += e.length_blocks;
            }
            _ => out.push(e),
        }
    }
    out
}

fn fragment_limit(rng: &mut ChaCha8Rng, probability: f64, max: u64) -> u64 {
    if max > 1 && probability > 0.0 && rng.random::<f64>() < probability {
        rng.random_range(1..max)
    } else {
        max
    }
}

/// Open reference to a file; keeps the inode and its blocks alive across
/// deletion until dropped.
pub struct FileHandle {
    store: Arc<ExtentStore>,
    inode: u64,
}

impl FileHandle {
    pub fn inode(&self) -> u64 {
        self.inode
    }

    pub fn store(&self) -> &Arc<ExtentStore> {
        &self.store
    }

    pub fn snapshot(&self) -> Result<Arc<ExtentMap>, StoreError> {
        self.store.snapshot(self.inode)
    }

    pub fn current_version(&self) -> Result<u64, StoreError> {
        self.store.current_version(self.inode)
    }

    pub fn file_length(&self) -> Result<u64, StoreError> {
        self.store.file_length(self.inode)
    }
}

impl Clone for FileHandle {
    fn clone(&self) -> Self {
        let mut inner = self.store.inner.lock();
        if let Some(f) = inner.files.get_mut(&self.inode) {
            f.handles += 1;
        }
        FileHandle {
            store: Arc::clone(&self.store),
            inode: self.inode,
        }
    }
}

impl Drop for FileHandle {
    fn drop(&mut self) {
        self.store.release_handle(self.inode);
    }
}

impl std::fmt::Debug for FileHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FileHandle").field("inode", &self.inode).finish()
    }
}
