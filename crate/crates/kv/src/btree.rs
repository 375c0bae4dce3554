//! Immutable B⁺-tree store: 512-byte nodes, 8-byte keys, 64-byte values in
//! an unsorted log region of the same file.
//!
//! The tree is bulk-loaded once with an exact level count — benchmarks need
//! "a lookup is N dependent reads" to be a property of the store, not an
//! accident of fill factors — and is read-only afterwards. The client may
//! hold the top levels in memory; a point lookup descends those locally and
//! ships the remaining chain (nodes, then one value read from the log) as a
//! single pushdown, or walks it block by block in baseline mode.

use std::collections::HashMap;
use std::sync::Arc;

use pushdown_core::formats::btree::{
    encode_header, encode_internal, encode_leaf, internal_capacity, leaf_capacity, parse_header,
    parse_node, route, Node, TreeHeader, LevelInfo, MAX_TREE_LEVELS,
};
use pushdown_core::functions::btree::{
    lookup_scratch, lookup_scratch_at_log, parse_lookup_result, parse_range_result, range_scratch,
    LookupResult, LOOKUP_VALUE_LEN,
};
use pushdown_core::functions::{FN_BTREE_LOOKUP, FN_BTREE_RANGE};
use pushdown_core::host::{AbortReason, HostClient, PushdownStatus, RequestStats};
use pushdown_core::store::{ExtentStore, StoreError};

pub use crate::Mode;

pub const NODE_SIZE: usize = 512;
pub const VALUE_LEN: usize = LOOKUP_VALUE_LEN;

#[derive(Debug, thiserror::Error)]
pub enum BtreeError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("no tree shape reaches {levels} node levels for {n_keys} keys")]
    Infeasible { n_keys: u64, levels: u32 },
    #[error("build input invalid: {0}")]
    BadInput(&'static str),
    #[error("on-device tree damaged: {0}")]
    Corrupt(&'static str),
    #[error("remote read failed: {0:?}")]
    ReadFailed(AbortReason),
}

/// Exact cost of one operation, summed over every request it issued.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub round_trips: u32,
    pub resubmissions: u32,
    pub device_reads: u32,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Pushdowns the target declined, answered via the baseline walk.
    pub fallbacks: u32,
    /// Version-check aborts encountered (then recovered from).
    pub aborts: u32,
}

impl OpStats {
    fn absorb(&mut self, s: &RequestStats) {
        self.round_trips += s.round_trips;
        self.resubmissions += s.resubmissions;
        self.device_reads += s.device_reads;
        self.bytes_sent += s.bytes_sent;
        self.bytes_received += s.bytes_received;
    }

    pub fn add(&mut self, other: &OpStats) {
        self.round_trips += other.round_trips;
        self.resubmissions += other.resubmissions;
        self.device_reads += other.device_reads;
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
        self.fallbacks += other.fallbacks;
        self.aborts += other.aborts;
    }
}

/// Chosen fanouts and per-level node counts (root first, leaves last).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape {
    pub leaf_fanout: usize,
    pub branching: usize,
    pub level_counts: Vec<u64>,
}

/// Find fanouts that place `n_keys` in a tree of exactly `node_levels`
/// levels (internal levels + the leaf level). Prefers the densest shape.
pub fn solve_shape(n_keys: u64, node_levels: u32) -> Result<Shape, BtreeError> {
    if n_keys == 0 || node_levels == 0 || node_levels as usize > MAX_TREE_LEVELS {
        return Err(BtreeError::Infeasible { n_keys, levels: node_levels });
    }
    let max_leaf = leaf_capacity(NODE_SIZE);
    let max_branch = internal_capacity(NODE_SIZE) + 1;
    for leaf_fanout in (1..=max_leaf).rev() {
        let leaves = n_keys.div_ceil(leaf_fanout as u64);
        'branch: for branching in (2..=max_branch).rev() {
            let mut counts = vec![leaves];
            while *counts.last().unwrap() > 1 {
                let last = *counts.last().unwrap();
                let next = last.div_ceil(branching as u64);
                // Every internal node needs at least two children, or it
                // would hold zero keys.
                if next * 2 > last {
                    continue 'branch;
                }
                counts.push(next);
            }
            if counts.len() == node_levels as usize {
                counts.reverse();
                return Ok(Shape { leaf_fanout, branching, level_counts: counts });
            }
        }
    }
    Err(BtreeError::Infeasible { n_keys, levels: node_levels })
}

/// Split `n` children into chunks of at most `branching`, avoiding chunks of
/// one (a one-child internal node holds zero keys, which the node format
/// forbids). Callers guarantee `2 * ceil(n / branching) <= n`, which the
/// shape solver enforces.
fn chunk_sizes(n: usize, branching: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = n;
    while left > 0 {
        let take = left.min(branching);
        if left - take == 1 && take == branching {
            // Donate one to the final chunk so it holds two children.
            sizes.push(take - 1);
            left -= take - 1;
        } else {
            sizes.push(take);
            left -= take;
        }
    }
    sizes
}

/// Bulk-load a tree over strictly ascending `keys` into a fresh file.
/// `value_of` must yield exactly [`VALUE_LEN`] bytes per key. Returns the
/// inode; the caller is responsible for letting the map sync to the target.
pub fn build(
    store: &Arc<ExtentStore>,
    name: &str,
    keys: &[u64],
    node_levels: u32,
    mut value_of: impl FnMut(u64) -> Vec<u8>,
) -> Result<u64, BtreeError> {
    if keys.is_empty() {
        return Err(BtreeError::BadInput("empty key set"));
    }
    if !keys.windows(2).all(|w| w[0] < w[1]) {
        return Err(BtreeError::BadInput("keys must be strictly ascending"));
    }
    let shape = solve_shape(keys.len() as u64, node_levels)?;
    let bs = NODE_SIZE as u64;

    // Offsets, root level first: header block, then each level in order.
    let mut level_offsets = Vec::with_capacity(shape.level_counts.len());
    let mut at = bs;
    for &count in &shape.level_counts {
        level_offsets.push(at);
        at += count * bs;
    }
    let log_offset = at;

    // Leaves, with value pointers into the log region (values are packed in
    // key order; VALUE_LEN divides the block size, so none straddles).
    let leaf_level = shape.level_counts.len() - 1;
    let mut levels_nodes: Vec<Vec<Vec<u8>>> = vec![Vec::new(); shape.level_counts.len()];
    let mut min_keys: Vec<Vec<u64>> = vec![Vec::new(); shape.level_counts.len()];
    {
        let leaf_base = level_offsets[leaf_level];
        let chunks: Vec<&[u64]> = keys.chunks(shape.leaf_fanout).collect();
        assert_eq!(chunks.len() as u64, shape.level_counts[leaf_level]);
        for (i, chunk) in chunks.iter().enumerate() {
            let next = if i + 1 < chunks.len() {
                leaf_base + (i as u64 + 1) * bs
            } else {
                0
            };
            let start_idx = i * shape.leaf_fanout;
            let entries: Vec<(u64, u64)> = chunk
                .iter()
                .enumerate()
                .map(|(j, &k)| (k, log_offset + (start_idx + j) as u64 * VALUE_LEN as u64))
                .collect();
            levels_nodes[leaf_level].push(encode_leaf(NODE_SIZE, next, &entries));
            min_keys[leaf_level].push(chunk[0]);
        }
    }

    // Internal levels, bottom-up: group the level below, separator keys are
    // the minimum keys of all children but the first.
    for level in (0..leaf_level).rev() {
        let child_count = shape.level_counts[level + 1] as usize;
        let child_base = level_offsets[level + 1];
        let sizes = chunk_sizes(child_count, shape.branching);
        assert_eq!(sizes.len() as u64, shape.level_counts[level]);
        let mut child = 0usize;
        for size in sizes {
            let children: Vec<u64> = (child..child + size)
                .map(|c| child_base + c as u64 * bs)
                .collect();
            let seps: Vec<u64> = (child + 1..child + size)
                .map(|c| min_keys[level + 1][c])
                .collect();
            let own_min = min_keys[level + 1][child];
            min_keys[level].push(own_min);
            levels_nodes[level].push(encode_internal(NODE_SIZE, &seps, &children));
            child += size;
        }
    }

    let header = TreeHeader {
        node_size: NODE_SIZE as u32,
        node_levels: shape.level_counts.len() as u32,
        n_keys: keys.len() as u64,
        root_offset: level_offsets[0],
        log_offset,
        value_len: VALUE_LEN as u32,
        levels: shape
            .level_counts
            .iter()
            .zip(&level_offsets)
            .map(|(&nodes, &offset)| LevelInfo { offset, nodes })
            .collect(),
    };

    let mut file = encode_header(&header, NODE_SIZE);
    for nodes in &levels_nodes {
        for n in nodes {
            file.extend_from_slice(n);
        }
    }
    debug_assert_eq!(file.len() as u64, log_offset);
    for &k in keys {
        let v = value_of(k);
        if v.len() != VALUE_LEN {
            return Err(BtreeError::BadInput("value must be exactly VALUE_LEN bytes"));
        }
        file.extend_from_slice(&v);
    }
    let pad = file.len().next_multiple_of(NODE_SIZE) - file.len();
    file.extend(std::iter::repeat_n(0u8, pad));

    let inode = store.create_file(name)?;
    store.append(inode, &file)?;
    Ok(inode)
}

enum Descent {
    /// Reached the first uncached node at this offset.
    Uncached(u64),
    /// Cached leaf answered: the value lives at this log pointer.
    LeafHit(u64),
    /// Cached leaf proves the key absent.
    LeafMiss,
}

pub struct BTreeStore {
    client: Arc<HostClient>,
    inode: u64,
    header: TreeHeader,
    cached_levels: u32,
    /// Parsed nodes of the cached top levels, keyed by file offset.
    cache: HashMap<u64, Node>,
    /// Scratch payload bytes granted to one range pushdown.
    pub range_budget: usize,
}

impl BTreeStore {
    pub fn open(
        client: Arc<HostClient>,
        inode: u64,
        cached_levels: u32,
    ) -> Result<BTreeStore, BtreeError> {
        let store = client.store().clone();
        let head = store.read_local(inode, 0, NODE_SIZE as u64)?;
        let header = parse_header(&head).map_err(|_| BtreeError::Corrupt("header"))?;
        let cached_levels = cached_levels.min(header.node_levels);
        let mut cache = HashMap::new();
        for level in &header.levels[..cached_levels as usize] {
            let bytes = store.read_local(inode, level.offset, level.nodes * NODE_SIZE as u64)?;
            for i in 0..level.nodes {
                let at = i as usize * NODE_SIZE;
                let node = parse_node(&bytes[at..at + NODE_SIZE])
                    .map_err(|_| BtreeError::Corrupt("node"))?;
                cache.insert(level.offset + i * NODE_SIZE as u64, node);
            }
        }
        Ok(BTreeStore {
            client,
            inode,
            header,
            cached_levels,
            cache,
            range_budget: 4096,
        })
    }

    pub fn inode(&self) -> u64 {
        self.inode
    }

    pub fn node_levels(&self) -> u32 {
        self.header.node_levels
    }

    pub fn cached_levels(&self) -> u32 {
        self.cached_levels
    }

    pub fn n_keys(&self) -> u64 {
        self.header.n_keys
    }

    /// Walk the cached top levels towards `key`.
    fn descend(&self, key: u64) -> Descent {
        let mut at = self.header.root_offset;
        for _ in 0..self.cached_levels {
            match &self.cache[&at] {
                Node::Internal { keys, children } => at = children[route(keys, key)],
                Node::Leaf { entries, .. } => {
                    return match entries.binary_search_by_key(&key, |e| e.0) {
                        Ok(i) => Descent::LeafHit(entries[i].1),
                        Err(_) => Descent::LeafMiss,
                    };
                }
            }
        }
        Descent::Uncached(at)
    }

    fn read_block(&self, offset: u64, stats: &mut OpStats) -> Result<Vec<u8>, BtreeError> {
        let reply = self.client.read_remote(self.inode, offset, NODE_SIZE as u64);
        stats.absorb(&reply.stats);
        reply
            .data
            .ok_or(BtreeError::ReadFailed(reply.abort.unwrap_or(AbortReason::Transport)))
    }

    /// Read the 64-byte value behind a leaf pointer, block-by-block style.
    fn read_value_baseline(&self, ptr: u64, stats: &mut OpStats) -> Result<Vec<u8>, BtreeError> {
        let block = ptr - ptr % NODE_SIZE as u64;
        let bytes = self.read_block(block, stats)?;
        let at = (ptr - block) as usize;
        Ok(bytes[at..at + VALUE_LEN].to_vec())
    }

    /// Walk nodes one remote read at a time starting at `offset`.
    fn walk_baseline(
        &self,
        key: u64,
        mut offset: u64,
        stats: &mut OpStats,
    ) -> Result<Option<Vec<u8>>, BtreeError> {
        loop {
            let block = self.read_block(offset, stats)?;
            match parse_node(&block).map_err(|_| BtreeError::Corrupt("node"))? {
                Node::Internal { keys, children } => offset = children[route(&keys, key)],
                Node::Leaf { entries, .. } => {
                    return match entries.binary_search_by_key(&key, |e| e.0) {
                        Ok(i) => Ok(Some(self.read_value_baseline(entries[i].1, stats)?)),
                        Err(_) => Ok(None),
                    };
                }
            }
        }
    }

    /// Point lookup. Returns the value (if any) and the exact request costs.
    pub fn get_point(
        &self,
        key: u64,
        mode: Mode,
    ) -> Result<(Option<Vec<u8>>, OpStats), BtreeError> {
        let mut stats = OpStats::default();
        let (scratch0, start) = match self.descend(key) {
            Descent::LeafMiss => return Ok((None, stats)),
            Descent::LeafHit(ptr) => {
                if mode == Mode::Baseline {
                    let v = self.read_value_baseline(ptr, &mut stats)?;
                    return Ok((Some(v), stats));
                }
                let block = ptr - ptr % NODE_SIZE as u64;
                (lookup_scratch_at_log(key, ptr), block)
            }
            Descent::Uncached(offset) => {
                if mode == Mode::Baseline {
                    let v = self.walk_baseline(key, offset, &mut stats)?;
                    return Ok((v, stats));
                }
                (lookup_scratch(key), offset)
            }
        };

        let mut scratch = scratch0;
        let reply = self.client.read_pushdown(
            &[self.inode],
            0,
            start,
            NODE_SIZE as u64,
            FN_BTREE_LOOKUP,
            &mut scratch,
        );
        stats.absorb(&reply.stats);
        match reply.status {
            PushdownStatus::Completed => match parse_lookup_result(&scratch) {
                Some(LookupResult::Found(v)) => Ok((Some(v), stats)),
                Some(LookupResult::Absent) => Ok((None, stats)),
                None => Err(BtreeError::Corrupt("lookup result")),
            },
            PushdownStatus::TargetFallback => {
                stats.fallbacks += 1;
                let v = self.walk_baseline(key, start, &mut stats)?;
                Ok((v, stats))
            }
            PushdownStatus::Aborted(reason) => {
                stats.aborts += 1;
                match reason {
                    AbortReason::PreCheckVersion
                    | AbortReason::PostCheckVersion
                    | AbortReason::TargetVersion => {
                        let v = self.walk_baseline(key, start, &mut stats)?;
                        Ok((v, stats))
                    }
                    other => Err(BtreeError::ReadFailed(other)),
                }
            }
        }
    }

    /// Find the leaf that could contain `key`, descending cached levels
    /// locally and reading the rest remotely.
    fn leaf_for(
        &self,
        key: u64,
        stats: &mut OpStats,
    ) -> Result<(u64, Node), BtreeError> {
        let mut at = self.header.root_offset;
        let mut level = 0;
        loop {
            let node = if level < self.cached_levels {
                self.cache[&at].clone()
            } else {
                let block = self.read_block(at, stats)?;
                parse_node(&block).map_err(|_| BtreeError::Corrupt("node"))?
            };
            match node {
                Node::Internal { keys, children } => {
                    at = children[route(&keys, key)];
                    level += 1;
                }
                leaf @ Node::Leaf { .. } => return Ok((at, leaf)),
            }
        }
    }

    fn leaf_at(&self, offset: u64, stats: &mut OpStats) -> Result<Node, BtreeError> {
        if let Some(node) = self.cache.get(&offset) {
            return Ok(node.clone());
        }
        let block = self.read_block(offset, stats)?;
        parse_node(&block).map_err(|_| BtreeError::Corrupt("node"))
    }

    /// Collect (key, log pointer) pairs in `[lo, hi]` by walking leaves.
    fn range_pairs_baseline(
        &self,
        lo: u64,
        hi: u64,
        stats: &mut OpStats,
    ) -> Result<Vec<(u64, u64)>, BtreeError> {
        let (_, mut leaf) = self.leaf_for(lo, stats)?;
        let mut out = Vec::new();
        loop {
            let Node::Leaf { next, entries } = leaf else {
                return Err(BtreeError::Corrupt("expected leaf"));
            };
            for (k, p) in &entries {
                if *k > hi {
                    return Ok(out);
                }
                if *k >= lo {
                    out.push((*k, *p));
                }
            }
            if next == 0 {
                return Ok(out);
            }
            leaf = self.leaf_at(next, stats)?;
        }
    }

    /// Collect pairs via the chained range function, resuming as often as
    /// the scratch budget requires.
    fn range_pairs_pushdown(
        &self,
        lo: u64,
        hi: u64,
        stats: &mut OpStats,
    ) -> Result<Vec<(u64, u64)>, BtreeError> {
        let mut out = Vec::new();
        let mut cursor = lo;
        loop {
            let start = match self.descend(cursor) {
                Descent::Uncached(offset) => offset,
                // Leaf level fully cached: walking locally is already free.
                Descent::LeafHit(_) | Descent::LeafMiss => {
                    let mut rest = self.range_pairs_baseline(cursor, hi, stats)?;
                    out.append(&mut rest);
                    return Ok(out);
                }
            };
            let mut scratch = range_scratch(cursor, hi, self.range_budget);
            let reply = self.client.read_pushdown(
                &[self.inode],
                0,
                start,
                NODE_SIZE as u64,
                FN_BTREE_RANGE,
                &mut scratch,
            );
            stats.absorb(&reply.stats);
            match reply.status {
                PushdownStatus::Completed => {
                    let result = parse_range_result(&scratch)
                        .ok_or(BtreeError::Corrupt("range result"))?;
                    out.extend(result.pairs);
                    match result.resume_after {
                        Some(last) if last < hi => match last.checked_add(1) {
                            Some(next) => cursor = next,
                            None => return Ok(out),
                        },
                        _ => return Ok(out),
                    }
                }
                PushdownStatus::TargetFallback => {
                    stats.fallbacks += 1;
                    let mut rest = self.range_pairs_baseline(cursor, hi, stats)?;
                    out.append(&mut rest);
                    return Ok(out);
                }
                PushdownStatus::Aborted(reason) => {
                    stats.aborts += 1;
                    match reason {
                        AbortReason::PreCheckVersion
                        | AbortReason::PostCheckVersion
                        | AbortReason::TargetVersion => {
                            let mut rest = self.range_pairs_baseline(cursor, hi, stats)?;
                            out.append(&mut rest);
                            return Ok(out);
                        }
                        other => return Err(BtreeError::ReadFailed(other)),
                    }
                }
            }
        }
    }

    /// Inclusive range query: all (key, value) pairs with lo ≤ key ≤ hi in
    /// ascending key order.
    pub fn get_range(
        &self,
        lo: u64,
        hi: u64,
        mode: Mode,
    ) -> Result<(Vec<(u64, Vec<u8>)>, OpStats), BtreeError> {
        let mut stats = OpStats::default();
        if lo > hi {
            return Ok((Vec::new(), stats));
        }
        let pairs = match mode {
            Mode::Baseline => self.range_pairs_baseline(lo, hi, &mut stats)?,
            Mode::Pushdown => self.range_pairs_pushdown(lo, hi, &mut stats)?,
        };
        // Values are packed in key order, so a range's pointers share log
        // blocks; fetch each block once.
        let mut out = Vec::with_capacity(pairs.len());
        let mut cached_block: Option<(u64, Vec<u8>)> = None;
        for (key, ptr) in pairs {
            let block = ptr - ptr % NODE_SIZE as u64;
            if cached_block.as_ref().map(|(b, _)| *b) != Some(block) {
                let bytes = self.read_block(block, &mut stats)?;
                cached_block = Some((block, bytes));
            }
            let bytes = &cached_block.as_ref().unwrap().1;
            let at = (ptr - block) as usize;
            out.push((key, bytes[at..at + VALUE_LEN].to_vec()));
        }
        Ok((out, stats))
    }
}
