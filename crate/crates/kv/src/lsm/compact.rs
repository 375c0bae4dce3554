//! Flush and whole-level compaction.
//!
//! Compaction merges one level into the next: newer entries win, equal-level
//! level-0 tables win by recency, and tombstones are dropped only when the
//! output level is the deepest one holding data (nothing older could be
//! shadowed). Output is re-split into files of roughly `file_bytes`.

use std::collections::BTreeMap;
use std::sync::Arc;

use pushdown_core::store::ExtentStore;

use super::memtable::Memtable;
use super::sstable::{write_sst, SstTable, SstWriteOpts};
use super::LsmError;

pub fn flush_memtable(
    store: &Arc<ExtentStore>,
    mem: &Memtable,
    name: &str,
    opts: &SstWriteOpts,
) -> Result<Arc<SstTable>, LsmError> {
    let entries: Vec<(u64, Option<Vec<u8>>)> =
        mem.iter().map(|(k, v)| (*k, v.clone())).collect();
    write_sst(store, name, &entries, opts)
}

/// Merge `newer` (a whole level; for level 0, ordered newest-first) with
/// `older` (the level below). Returns the new lower level, sorted and
/// disjoint. May return no tables when everything was tombstones.
pub fn merge_tables(
    store: &Arc<ExtentStore>,
    newer: &[Arc<SstTable>],
    older: &[Arc<SstTable>],
    drop_tombstones: bool,
    file_bytes: u64,
    opts: &SstWriteOpts,
    mut next_name: impl FnMut() -> String,
) -> Result<Vec<Arc<SstTable>>, LsmError> {
    let mut merged: BTreeMap<u64, Option<Vec<u8>>> = BTreeMap::new();
    for t in older {
        for (k, v) in t.entries()? {
            merged.insert(k, v);
        }
    }
    // Oldest first, so the newest write to a key lands last.
    for t in newer.iter().rev() {
        for (k, v) in t.entries()? {
            merged.insert(k, v);
        }
    }

    let mut out = Vec::new();
    let mut chunk: Vec<(u64, Option<Vec<u8>>)> = Vec::new();
    let mut chunk_bytes = 0u64;
    for (k, v) in merged {
        if drop_tombstones && v.is_none() {
            continue;
        }
        chunk_bytes += 14 + v.as_ref().map_or(0, |v| v.len() as u64);
        chunk.push((k, v));
        if chunk_bytes >= file_bytes {
            out.push(write_sst(store, &next_name(), &chunk, opts)?);
            chunk.clear();
            chunk_bytes = 0;
        }
    }
    if !chunk.is_empty() {
        out.push(write_sst(store, &next_name(), &chunk, opts)?);
    }
    Ok(out)
}
