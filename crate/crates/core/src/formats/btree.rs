//! Node and header layout of the block-granular B⁺-tree.
//!
//! Every node occupies exactly one device block (`node_size` bytes, 512 by
//! default). All integers little-endian. Child pointers and leaf value
//! pointers are absolute byte offsets into the same file, so a traversal is
//! a chain of single-block reads.
//!
//! ```text
//! node:     [u32 magic "BTN1"][u8 kind][3 pad][u32 nkeys][4 pad]   (16-byte header)
//! internal: header, nkeys × u64 key, (nkeys+1) × u64 child_offset
//! leaf:     header, u64 next_leaf_offset (0 = last), nkeys × (u64 key, u64 value_ptr)
//! ```
//!
//! Routing: `keys[i]` is the smallest key reachable under `children[i+1]`,
//! so a lookup descends into `children[#keys ≤ k]`.
//!
//! File block 0 is the tree header:
//!
//! ```text
//! [u32 magic "BTH1"][u32 format=1][u32 node_size][u32 node_levels]
//! [u64 n_keys][u64 root_offset][u64 log_offset][u32 value_len][4 pad]
//! node_levels × (u64 level_offset, u64 level_nodes)   — top (root) first
//! ```
//!
//! Values live in an unsorted log region after the leaves: fixed
//! `value_len`-byte records packed so none straddles a block boundary.

pub const NODE_MAGIC: u32 = u32::from_le_bytes(*b"BTN1");
pub const HEADER_MAGIC: u32 = u32::from_le_bytes(*b"BTH1");
pub const NODE_HEADER_LEN: usize = 16;
pub const KIND_INTERNAL: u8 = 0;
pub const KIND_LEAF: u8 = 1;
pub const MAX_TREE_LEVELS: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NodeError {
    #[error("buffer too small for a node")]
    TooSmall,
    #[error("bad node magic")]
    BadMagic,
    #[error("unknown node kind {0}")]
    BadKind(u8),
    #[error("key count {0} exceeds node capacity")]
    BadCount(u32),
    #[error("keys not strictly ascending")]
    Unsorted,
    #[error("bad header: {0}")]
    BadHeader(&'static str),
}

/// Keys an internal node can hold in `node_size` bytes.
pub fn internal_capacity(node_size: usize) -> usize {
    // header + n keys + (n+1) children: 16 + 8n + 8(n+1) <= node_size
    (node_size - NODE_HEADER_LEN - 8) / 16
}

/// Entries a leaf can hold in `node_size` bytes.
pub fn leaf_capacity(node_size: usize) -> usize {
    // header + next pointer + n (key, ptr) pairs
    (node_size - NODE_HEADER_LEN - 8) / 16
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Internal {
        keys: Vec<u64>,
        children: Vec<u64>,
    },
    Leaf {
        next: u64,
        entries: Vec<(u64, u64)>,
    },
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }
}

/// Child index for `key` given an internal node's separator keys.
pub fn route(keys: &[u64], key: u64) -> usize {
    keys.partition_point(|&k| k <= key)
}

pub fn parse_node(buf: &[u8]) -> Result<Node, NodeError> {
    if buf.len() < NODE_HEADER_LEN {
        return Err(NodeError::TooSmall);
    }
    let magic = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    if magic != NODE_MAGIC {
        return Err(NodeError::BadMagic);
    }
    let kind = buf[4];
    let nkeys = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let read_u64 = |off: usize| u64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
    match kind {
        KIND_INTERNAL => {
            if nkeys == 0 || nkeys > internal_capacity(buf.len()) {
                return Err(NodeError::BadCount(nkeys as u32));
            }
            let mut keys = Vec::with_capacity(nkeys);
            for i in 0..nkeys {
                keys.push(read_u64(NODE_HEADER_LEN + i * 8));
            }
            if !keys.windows(2).all(|w| w[0] < w[1]) {
                return Err(NodeError::Unsorted);
            }
            let child_base = NODE_HEADER_LEN + nkeys * 8;
            let mut children = Vec::with_capacity(nkeys + 1);
            for i in 0..=nkeys {
                children.push(read_u64(child_base + i * 8));
            }
            Ok(Node::Internal { keys, children })
        }
        KIND_LEAF => {
            if nkeys > leaf_capacity(buf.len()) {
                return Err(NodeError::BadCount(nkeys as u32));
            }
            let next = read_u64(NODE_HEADER_LEN);
            let mut entries = Vec::with_capacity(nkeys);
            for i in 0..nkeys {
                let base = NODE_HEADER_LEN + 8 + i * 16;
                entries.push((read_u64(base), read_u64(base + 8)));
            }
            if !entries.windows(2).all(|w| w[0].0 < w[1].0) {
                return Err(NodeError::Unsorted);
            }
            Ok(Node::Leaf { next, entries })
        }
        other => Err(NodeError::BadKind(other)),
    }
}

fn node_header(out: &mut Vec<u8>, kind: u8, nkeys: usize) {
    out.extend_from_slice(&NODE_MAGIC.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&(nkeys as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
}

pub fn encode_internal(node_size: usize, keys: &[u64], children: &[u64]) -> Vec<u8> {
    assert_eq!(children.len(), keys.len() + 1);
    assert!(!keys.is_empty() && keys.len() <= internal_capacity(node_size));
    let mut out = Vec::with_capacity(node_size);
    node_header(&mut out, KIND_INTERNAL, keys.len());
    for k in keys {
        out.extend_from_slice(&k.to_le_bytes());
    }
    for c in children {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.resize(node_size, 0);
    out
}

pub fn encode_leaf(node_size: usize, next: u64, entries: &[(u64, u64)]) -> Vec<u8> {
    assert!(entries.len() <= leaf_capacity(node_size));
    let mut out = Vec::with_capacity(node_size);
    node_header(&mut out, KIND_LEAF, entries.len());
    out.extend_from_slice(&next.to_le_bytes());
    for (k, v) in entries {
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.resize(node_size, 0);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelInfo {
    pub offset: u64,
    pub nodes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeHeader {
    pub node_size: u32,
    pub node_levels: u32,
    pub n_keys: u64,
    pub root_offset: u64,
    pub log_offset: u64,
    pub value_len: u32,
    /// Per level, top (root) first; `levels.len() == node_levels`.
    pub levels: Vec<LevelInfo>,
}

pub fn encode_header(h: &TreeHeader, block_size: usize) -> Vec<u8> {
    assert!(h.levels.len() == h.node_levels as usize);
    assert!(h.levels.len() <= MAX_TREE_LEVELS);
    let mut out = Vec::with_capacity(block_size);
    out.extend_from_slice(&HEADER_MAGIC.to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&h.node_size.to_le_bytes());
    out.extend_from_slice(&h.node_levels.to_le_bytes());
    out.extend_from_slice(&h.n_keys.to_le_bytes());
    out.extend_from_slice(&h.root_offset.to_le_bytes());
    out.extend_from_slice(&h.log_offset.to_le_bytes());
    out.extend_from_slice(&h.value_len.to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for l in &h.levels {
        out.extend_from_slice(&l.offset.to_le_bytes());
        out.extend_from_slice(&l.nodes.to_le_bytes());
    }
    assert!(out.len() <= block_size, "header exceeds one block");
    out.resize(block_size, 0);
    out
}

pub fn parse_header(buf: &[u8]) -> Result<TreeHeader, NodeError> {
    if buf.len() < 48 {
        return Err(NodeError::TooSmall);
    }
    let u32_at = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
    let u64_at = |off: usize| u64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
    if u32_at(0) != HEADER_MAGIC {
        return Err(NodeError::BadMagic);
    }
    if u32_at(4) != 1 {
        return Err(NodeError::BadHeader("unknown format version"));
    }
    let node_size = u32_at(8);
    let node_levels = u32_at(12);
    if node_levels == 0 || node_levels as usize > MAX_TREE_LEVELS {
        return Err(NodeError::BadHeader("level count out of range"));
    }
    let mut levels = Vec::with_capacity(node_levels as usize);
    for i in 0..node_levels as usize {
        let base = 48 + i * 16;
        if base + 16 > buf.len() {
            return Err(NodeError::TooSmall);
        }
        levels.push(LevelInfo {
            offset: u64_at(base),
            nodes: u64_at(base + 8),
        });
    }
    Ok(TreeHeader {
        node_size,
        node_levels,
        n_keys: u64_at(16),
        root_offset: u64_at(24),
        log_offset: u64_at(32),
        value_len: u32_at(40),
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacities_at_512() {
        assert_eq!(internal_capacity(512), 30);
        assert_eq!(leaf_capacity(512), 30);
    }

    #[test]
    fn internal_roundtrip_and_routing() {
        let keys = vec![10u64, 20, 30];
        let children = vec![1000u64, 2000, 3000, 4000];
        let bytes = encode_internal(512, &keys, &children);
        assert_eq!(bytes.len(), 512);
        let node = parse_node(&bytes).unwrap();
        assert_eq!(
            node,
            Node::Internal { keys: keys.clone(), children: children.clone() }
        );
        assert_eq!(route(&keys, 5), 0);
        assert_eq!(route(&keys, 10), 1);
        assert_eq!(route(&keys, 19), 1);
        assert_eq!(route(&keys, 30), 3);
        assert_eq!(route(&keys, u64::MAX), 3);
    }

    #[test]
    fn leaf_roundtrip() {
        let entries = vec![(1u64, 111u64), (5, 555), (9, 999)];
        let bytes = encode_leaf(512, 4096, &entries);
        let node = parse_node(&bytes).unwrap();
        assert_eq!(node, Node::Leaf { next: 4096, entries });
    }

    #[test]
    fn parser_rejects_garbage() {
        assert_eq!(parse_node(&[0u8; 8]), Err(NodeError::TooSmall));
        assert_eq!(parse_node(&[0u8; 512]), Err(NodeError::BadMagic));
        let mut bytes = encode_leaf(512, 0, &[(3, 30), (1, 10)]);
        // entries out of order
        assert_eq!(parse_node(&bytes), Err(NodeError::Unsorted));
        // absurd count
        bytes = encode_leaf(512, 0, &[(1, 10)]);
        bytes[8..12].copy_from_slice(&999u32.to_le_bytes());
        assert_eq!(parse_node(&bytes), Err(NodeError::BadCount(999)));
    }

    #[test]
    fn header_roundtrip() {
        let h = TreeHeader {
            node_size: 512,
            node_levels: 3,
            n_keys: 1000,
            root_offset: 512,
            log_offset: 1 << 20,
            value_len: 64,
            levels: vec![
                LevelInfo { offset: 512, nodes: 1 },
                LevelInfo { offset: 1024, nodes: 4 },
                LevelInfo { offset: 3072, nodes: 40 },
            ],
        };
        let bytes = encode_header(&h, 512);
        assert_eq!(bytes.len(), 512);
        assert_eq!(parse_header(&bytes).unwrap(), h);
    }
}
