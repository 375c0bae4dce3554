//! In-memory write buffer. Tombstones are `None` values — they must survive
//! until compaction proves nothing older is shadowed.

use std::collections::BTreeMap;

/// Rough per-entry bookkeeping overhead added to the payload size.
const ENTRY_OVERHEAD: usize = 24;

#[derive(Debug, Default)]
pub struct Memtable {
    map: BTreeMap<u64, Option<Vec<u8>>>,
    bytes: usize,
}

impl Memtable {
    pub fn new() -> Memtable {
        Memtable::default()
    }

    fn entry_bytes(value: &Option<Vec<u8>>) -> usize {
        8 + ENTRY_OVERHEAD + value.as_ref().map_or(0, |v| v.len())
    }

    /// Insert a value or (with `None`) a tombstone, replacing any prior
    /// entry for the key.
    pub fn insert(&mut self, key: u64, value: Option<Vec<u8>>) {
        self.bytes += Self::entry_bytes(&value);
        if let Some(old) = self.map.insert(key, value) {
            self.bytes -= Self::entry_bytes(&old);
        }
    }

    /// Outer `None` = key unknown here; `Some(None)` = deleted.
    pub fn get(&self, key: u64) -> Option<Option<Vec<u8>>> {
        self.map.get(&key).cloned()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u64, &Option<Vec<u8>>)> {
        self.map.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replacement_keeps_byte_accounting_exact() {
        let mut m = Memtable::new();
        m.insert(1, Some(vec![0; 100]));
        m.insert(2, None);
        let two = m.bytes();
        m.insert(1, Some(vec![0; 10]));
        assert_eq!(m.bytes(), two - 90);
        m.insert(1, None);
        m.insert(2, Some(vec![0; 7]));
        assert_eq!(m.len(), 2);
        assert_eq!(m.get(1), Some(None));
        assert_eq!(m.get(2), Some(Some(vec![0; 7])));
        assert_eq!(m.get(3), None);
        assert_eq!(m.bytes(), 2 * (8 + 24) + 7);
    }

    #[test]
    fn iteration_is_key_ordered() {
        let mut m = Memtable::new();
        for k in [5u64, 1, 9, 3] {
            m.insert(k, Some(vec![k as u8]));
        }
        let keys: Vec<u64> = m.iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, vec![1, 3, 5, 9]);
    }
}
