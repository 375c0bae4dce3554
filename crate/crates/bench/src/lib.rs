//! Benchmark harness for the pushdown storage stack: deterministic YCSB-style
//! workload generation, counter/latency metrics with a machine-readable
//! report, and a runner that drives either key-value store over an
//! in-process rig or a TCP target.

pub mod metrics;
pub mod runner;
pub mod workload;

/// FNV-1a over a byte string; used for key scrambling and result digests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }
}
