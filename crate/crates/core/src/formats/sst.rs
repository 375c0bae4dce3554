//! Sorted-table (SST) file layout: data blocks, index block, Bloom filter,
//! footer. Keys and values are arbitrary byte strings; entries within a
//! block are sorted ascending. All integers little-endian.
//!
//! ```text
//! entry:   [u16 key_len][key][u32 value_len][value]
//!          value_len = 0xFFFFFFFF marks a tombstone (no value bytes)
//! block:   entries..., [u32 restart_offset × n][u32 n_restarts]
//! index:   a block whose entries map last-key-of-data-block →
//!          [u64 offset][u32 length] (12-byte handle)
//! filter:  [u32 magic "BLM1"][u32 k][u64 n_bits][n_bits/64 × u64 words]
//! footer:  [u64 index_off][u32 index_len][u64 filter_off][u32 filter_len]
//!          [u64 n_entries][u32 format=1][u32 magic "SST1"]      (40 bytes,
//!          flush with the end of the file)
//! ```
//!
//! A restart point is recorded every [`RESTART_INTERVAL`] entries; point
//! lookups binary-search the restart array, then scan at most one interval.

pub const RESTART_INTERVAL: usize = 16;
pub const TOMBSTONE_LEN: u32 = u32::MAX;
pub const SST_MAGIC: u32 = u32::from_le_bytes(*b"SST1");
pub const BLOOM_MAGIC: u32 = u32::from_le_bytes(*b"BLM1");
pub const FOOTER_LEN: usize = 40;
/// Hash probes per key, fixed for 10 bits/key.
pub const BLOOM_K: u32 = 7;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SstError {
    #[error("block truncated or corrupt")]
    Corrupt,
    #[error("bad magic")]
    BadMagic,
    #[error("entry keys not ascending")]
    Unsorted,
}

/// Appends sorted entries and serializes one block.
pub struct BlockBuilder {
    buf: Vec<u8>,
    restarts: Vec<u32>,
    n_entries: usize,
    last_key: Vec<u8>,
}

impl Default for BlockBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockBuilder {
    pub fn new() -> Self {
        BlockBuilder {
            buf: Vec::new(),
            restarts: Vec::new(),
            n_entries: 0,
            last_key: Vec::new(),
        }
    }

    /// `value = None` writes a tombstone. Keys must arrive strictly
    /// ascending.
    pub fn add(&mut self, key: &[u8], value: Option<&[u8]>) {
        assert!(
            self.n_entries == 0 || self.last_key.as_slice() < key,
            "keys must be strictly ascending"
        );
        assert!(key.len() <= u16::MAX as usize, "key too long");
        if self.n_entries.is_multiple_of(RESTART_INTERVAL) {
            self.restarts.push(self.buf.len() as u32);
        }
        self.buf.extend_from_slice(&(key.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(key);
        match value {
            Some(v) => {
                assert!((v.len() as u64) < TOMBSTONE_LEN as u64, "value too long");
                self.buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
                self.buf.extend_from_slice(v);
            }
            None => self.buf.extend_from_slice(&TOMBSTONE_LEN.to_le_bytes()),
        }
        self.last_key.clear();
        self.last_key.extend_from_slice(key);
        self.n_entries += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.n_entries == 0
    }

    pub fn n_entries(&self) -> usize {
        self.n_entries
    }

    pub fn last_key(&self) -> &[u8] {
        &self.last_key
    }

    /// Serialized size if finished now.
    pub fn estimated_len(&self) -> usize {
        self.buf.len() + 4 * self.restarts.len() + 4
    }

    pub fn finish(mut self) -> Vec<u8> {
        let n = self.restarts.len() as u32;
        for r in &self.restarts {
            self.buf.extend_from_slice(&r.to_le_bytes());
        }
        self.buf.extend_from_slice(&n.to_le_bytes());
        self.buf
    }
}

/// Result of a point search inside one data block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EntrySearch {
    Value(Vec<u8>),
    Tombstone,
    Absent,
}

struct BlockView<'a> {
    data: &'a [u8],
    restarts: &'a [u8],
    n_restarts: usize,
}

fn block_view(block: &[u8]) -> Result<BlockView<'_>, SstError> {
    if block.len() < 4 {
        return Err(SstError::Corrupt);
    }
    let n = u32::from_le_bytes(block[block.len() - 4..].try_into().unwrap()) as usize;
    let restart_bytes = n.checked_mul(4).ok_or(SstError::Corrupt)?;
    let data_len = block
        .len()
        .checked_sub(4 + restart_bytes)
        .ok_or(SstError::Corrupt)?;
    Ok(BlockView {
        data: &block[..data_len],
        restarts: &block[data_len..block.len() - 4],
        n_restarts: n,
    })
}

/// (key, value-or-tombstone, next position): one parsed block entry.
type RawEntry<'a> = (&'a [u8], Option<&'a [u8]>, usize);

impl<'a> BlockView<'a> {
    fn restart(&self, i: usize) -> Result<usize, SstError> {
        let off = u32::from_le_bytes(self.restarts[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        if off > self.data.len() {
            return Err(SstError::Corrupt);
        }
        Ok(off)
    }

    /// Parse the entry at `pos`; returns (key, value, next_pos).
    fn entry(&self, pos: usize) -> Result<RawEntry<'a>, SstError> {
        let need = |n: usize| -> Result<usize, SstError> {
            let end = pos.checked_add(n).ok_or(SstError::Corrupt)?;
            if end > self.data.len() {
                Err(SstError::Corrupt)
            } else {
                Ok(end)
            }
        };
        need(2)?;
        let klen = u16::from_le_bytes(self.data[pos..pos + 2].try_into().unwrap()) as usize;
        let kend = need(2 + klen)?;
        let key = &self.data[pos + 2..kend];
        let vend = need(2 + klen + 4)?;
        let vlen = u32::from_le_bytes(self.data[kend..vend].try_into().unwrap());
        if vlen == TOMBSTONE_LEN {
            return Ok((key, None, vend));
        }
        let end = vend.checked_add(vlen as usize).ok_or(SstError::Corrupt)?;
        if end > self.data.len() {
            return Err(SstError::Corrupt);
        }
        Ok((key, Some(&self.data[vend..end]), end))
    }

    fn first_key_at_restart(&self, i: usize) -> Result<&'a [u8], SstError> {
        let (k, _, _) = self.entry(self.restart(i)?)?;
        Ok(k)
    }
}

/// Point lookup within one block.
pub fn block_find(block: &[u8], key: &[u8]) -> Result<EntrySearch, SstError> {
    let view = block_view(block)?;
    if view.n_restarts == 0 {
        return Ok(EntrySearch::Absent);
    }
    // Rightmost restart whose first key <= key.
    let mut lo = 0usize;
    let mut hi = view.n_restarts - 1;
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if view.first_key_at_restart(mid)? <= key {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut pos = view.restart(lo)?;
    let mut prev: Option<&[u8]> = None;
    while pos < view.data.len() {
        let (k, v, next) = view.entry(pos)?;
        if let Some(p) = prev {
            if p >= k {
                return Err(SstError::Unsorted);
            }
        }
        prev = Some(k);
        match k.cmp(key) {
            std::cmp::Ordering::Less => pos = next,
            std::cmp::Ordering::Equal => {
                return Ok(match v {
                    Some(v) => EntrySearch::Value(v.to_vec()),
                    None => EntrySearch::Tombstone,
                })
            }
            std::cmp::Ordering::Greater => return Ok(EntrySearch::Absent),
        }
    }
    Ok(EntrySearch::Absent)
}

/// Owned (key, value-or-tombstone) pairs decoded from one block.
pub type OwnedEntries = Vec<(Vec<u8>, Option<Vec<u8>>)>;

/// All entries of a block in order (compaction, scans, oracles).
pub fn block_entries(block: &[u8]) -> Result<OwnedEntries, SstError> {
    let view = block_view(block)?;
    let mut out: OwnedEntries = Vec::new();
    let mut pos = 0usize;
    while pos < view.data.len() {
        let (k, v, next) = view.entry(pos)?;
        if let Some((pk, _)) = out.last() {
            if pk.as_slice() >= k {
                return Err(SstError::Unsorted);
            }
        }
        out.push((k.to_vec(), v.map(|v| v.to_vec())));
        pos = next;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockHandle {
    pub offset: u64,
    pub length: u32,
}

impl BlockHandle {
    pub fn encode(&self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[..8].copy_from_slice(&self.offset.to_le_bytes());
        out[8..].copy_from_slice(&self.length.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<BlockHandle, SstError> {
        if buf.len() != 12 {
            return Err(SstError::Corrupt);
        }
        Ok(BlockHandle {
            offset: u64::from_le_bytes(buf[..8].try_into().unwrap()),
            length: u32::from_le_bytes(buf[8..].try_into().unwrap()),
        })
    }
}

/// Index lookup: handle of the first data block whose last key is >= `key`,
/// or `None` when `key` is past the file's last key.
pub fn index_seek(index_block: &[u8], key: &[u8]) -> Result<Option<BlockHandle>, SstError> {
    let view = block_view(index_block)?;
    if view.n_restarts == 0 {
        return Ok(None);
    }
    // Rightmost restart whose first key < key: the target entry cannot be
    // before it.
    let mut lo = 0usize;
    let mut hi = view.n_restarts - 1;
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if view.first_key_at_restart(mid)? < key {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut pos = view.restart(lo)?;
    while pos < view.data.len() {
        let (k, v, next) = view.entry(pos)?;
        if k >= key {
            let v = v.ok_or(SstError::Corrupt)?;
            return Ok(Some(BlockHandle::decode(v)?));
        }
        pos = next;
    }
    Ok(None)
}

/// All (last_key, handle) pairs of an index block.
pub fn index_entries(index_block: &[u8]) -> Result<Vec<(Vec<u8>, BlockHandle)>, SstError> {
    block_entries(index_block)?
        .into_iter()
        .map(|(k, v)| {
            let v = v.ok_or(SstError::Corrupt)?;
            Ok((k, BlockHandle::decode(&v)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Footer {
    pub index: BlockHandle,
    pub filter: Option<BlockHandle>,
    pub n_entries: u64,
}

impl Footer {
    pub fn encode(&self) -> [u8; FOOTER_LEN] {
        let mut out = [0u8; FOOTER_LEN];
        out[0..8].copy_from_slice(&self.index.offset.to_le_bytes());
        out[8..12].copy_from_slice(&self.index.length.to_le_bytes());
        let filter = self.filter.unwrap_or(BlockHandle { offset: 0, length: 0 });
        out[12..20].copy_from_slice(&filter.offset.to_le_bytes());
        out[20..24].copy_from_slice(&filter.length.to_le_bytes());
        out[24..32].copy_from_slice(&self.n_entries.to_le_bytes());
        out[32..36].copy_from_slice(&1u32.to_le_bytes());
        out[36..40].copy_from_slice(&SST_MAGIC.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Footer, SstError> {
        if buf.len() != FOOTER_LEN {
            return Err(SstError::Corrupt);
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        if u32_at(36) != SST_MAGIC || u32_at(32) != 1 {
            return Err(SstError::BadMagic);
        }
        let filter_len = u32_at(20);
        Ok(Footer {
            index: BlockHandle { offset: u64_at(0), length: u32_at(8) },
            filter: (filter_len > 0).then(|| BlockHandle {
                offset: u64_at(12),
                length: filter_len,
            }),
            n_entries: u64_at(24),
        })
    }
}

/// Standard Bloom filter over full keys; double hashing from two 64-bit
/// FNV-1a variants, [`BLOOM_K`] probes.
#[derive(Clone, Debug)]
pub struct BloomFilter {
    n_bits: u64,
    words: Vec<u64>,
}

fn fnv1a(key: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl BloomFilter {
    pub fn build<'a>(keys: impl Iterator<Item = &'a [u8]>, n_keys: usize, bits_per_key: u32) -> Self {
        let n_bits = (n_keys as u64 * bits_per_key as u64).max(64);
        let n_bits = n_bits.div_ceil(64) * 64;
        let mut words = vec![0u64; (n_bits / 64) as usize];
        for key in keys {
            let h1 = fnv1a(key, 0);
            let h2 = fnv1a(key, 0x9e37_79b9_7f4a_7c15) | 1;
            for i in 0..BLOOM_K as u64 {
                let bit = h1.wrapping_add(i.wrapping_mul(h2)) % n_bits;
                words[(bit / 64) as usize] |= 1u64 << (bit % 64);
            }
        }
        BloomFilter { n_bits, words }
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        let h1 = fnv1a(key, 0);
        let h2 = fnv1a(key, 0x9e37_79b9_7f4a_7c15) | 1;
        (0..BLOOM_K as u64).all(|i| {
            let bit = h1.wrapping_add(i.wrapping_mul(h2)) % self.n_bits;
            self.words[(bit / 64) as usize] & (1u64 << (bit % 64)) != 0
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.words.len() * 8);
        out.extend_from_slice(&BLOOM_MAGIC.to_le_bytes());
        out.extend_from_slice(&BLOOM_K.to_le_bytes());
        out.extend_from_slice(&self.n_bits.to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<BloomFilter, SstError> {
        if buf.len() < 16 {
            return Err(SstError::Corrupt);
        }
        if u32::from_le_bytes(buf[0..4].try_into().unwrap()) != BLOOM_MAGIC {
            return Err(SstError::BadMagic);
        }
        if u32::from_le_bytes(buf[4..8].try_into().unwrap()) != BLOOM_K {
            return Err(SstError::Corrupt);
        }
        let n_bits = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        if n_bits == 0 || n_bits % 64 != 0 || buf.len() != 16 + (n_bits / 8) as usize {
            return Err(SstError::Corrupt);
        }
        let words = buf[16..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(BloomFilter { n_bits, words })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_block(entries: &[(&[u8], Option<&[u8]>)]) -> Vec<u8> {
        let mut b = BlockBuilder::new();
        for (k, v) in entries {
            b.add(k, *v);
        }
        b.finish()
    }

    #[test]
    fn block_find_hits_misses_tombstones() {
        let entries: Vec<(Vec<u8>, Option<Vec<u8>>)> = (0..100u32)
            .map(|i| {
                let k = format!("key{i:04}").into_bytes();
                if i % 7 == 0 {
                    (k, None)
                } else {
                    (k, Some(format!("val{i}").into_bytes()))
                }
            })
            .collect();
        let refs: Vec<(&[u8], Option<&[u8]>)> = entries
            .iter()
            .map(|(k, v)| (k.as_slice(), v.as_deref()))
            .collect();
        let block = build_block(&refs);
        for (i, (k, v)) in entries.iter().enumerate() {
            let got = block_find(&block, k).unwrap();
            match v {
                Some(v) => assert_eq!(got, EntrySearch::Value(v.clone()), "entry {i}"),
                None => assert_eq!(got, EntrySearch::Tombstone, "entry {i}"),
            }
        }
        assert_eq!(block_find(&block, b"key0050x").unwrap(), EntrySearch::Absent);
        assert_eq!(block_find(&block, b"aaa").unwrap(), EntrySearch::Absent);
        assert_eq!(block_find(&block, b"zzz").unwrap(), EntrySearch::Absent);
        assert_eq!(block_entries(&block).unwrap(), entries);
    }

    #[test]
    fn block_parser_survives_corruption() {
        let block = build_block(&[(b"a", Some(b"1")), (b"b", None), (b"c", Some(b"3"))]);
        for i in 0..block.len() {
            for bit in 0..8 {
                let mut m = block.clone();
                m[i] ^= 1 << bit;
                let _ = block_find(&m, b"b");
                let _ = block_entries(&m);
            }
        }
        assert!(block_find(&[], b"x").is_err());
        assert!(block_find(&[0xff; 3], b"x").is_err());
    }

    #[test]
    fn index_seek_finds_covering_block() {
        let mut b = BlockBuilder::new();
        let h1 = BlockHandle { offset: 0, length: 4000 };
        let h2 = BlockHandle { offset: 4096, length: 4000 };
        let h3 = BlockHandle { offset: 8192, length: 1000 };
        b.add(b"dog", Some(&h1.encode()));
        b.add(b"mouse", Some(&h2.encode()));
        b.add(b"zebra", Some(&h3.encode()));
        let index = b.finish();
        assert_eq!(index_seek(&index, b"aardvark").unwrap(), Some(h1));
        assert_eq!(index_seek(&index, b"dog").unwrap(), Some(h1));
        assert_eq!(index_seek(&index, b"dot").unwrap(), Some(h2));
        assert_eq!(index_seek(&index, b"mouse").unwrap(), Some(h2));
        assert_eq!(index_seek(&index, b"zebra").unwrap(), Some(h3));
        assert_eq!(index_seek(&index, b"zzz").unwrap(), None);
        assert_eq!(
            index_entries(&index).unwrap(),
            vec![
                (b"dog".to_vec(), h1),
                (b"mouse".to_vec(), h2),
                (b"zebra".to_vec(), h3)
            ]
        );
    }

    #[test]
    fn footer_roundtrip() {
        let f = Footer {
            index: BlockHandle { offset: 1 << 20, length: 777 },
            filter: Some(BlockHandle { offset: 2 << 20, length: 123 }),
            n_entries: 555,
        };
        assert_eq!(Footer::decode(&f.encode()).unwrap(), f);
        let f = Footer { filter: None, ..f };
        assert_eq!(Footer::decode(&f.encode()).unwrap(), f);
        assert!(Footer::decode(&[0u8; FOOTER_LEN]).is_err());
    }

    #[test]
    fn bloom_no_false_negatives_and_low_false_positives() {
        let keys: Vec<Vec<u8>> = (0..10_000u32)
            .map(|i| format!("k{i:06}").into_bytes())
            .collect();
        let bloom = BloomFilter::build(keys.iter().map(|k| k.as_slice()), keys.len(), 10);
        for k in &keys {
            assert!(bloom.contains(k), "false negative");
        }
        let fp = (10_000..30_000u32)
            .filter(|i| bloom.contains(format!("k{i:06}").as_bytes()))
            .count();
        // 10 bits/key, k=7 gives ~0.8-1% theoretical; allow slack.
        assert!(fp < 600, "false positive rate too high: {fp}/20000");
        let decoded = BloomFilter::decode(&bloom.encode()).unwrap();
        for k in &keys {
            assert!(decoded.contains(k));
        }
    }
}
