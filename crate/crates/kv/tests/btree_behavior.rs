//! B⁺-tree store: oracle equivalence for points and ranges in both read
//! modes, across tree depths and client cache heights, plus the round-trip
//! accounting the benchmarks rely on.

use pushdown_core::functions::btree::{RANGE_MIN_SCRATCH_LEN, RANGE_PAIR_LEN};
use pushdown_core::loopback::{Loopback, LoopbackOptions};
use pushdown_kv::btree::{build, solve_shape, BTreeStore, NODE_SIZE, VALUE_LEN};
use pushdown_kv::Mode;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn value_for(key: u64) -> Vec<u8> {
    let mut v = vec![0u8; VALUE_LEN];
    let seed = key.wrapping_mul(0x9e3779b97f4a7c15);
    for (i, b) in v.iter_mut().enumerate() {
        *b = (seed >> (8 * (i % 8))) as u8 ^ i as u8;
    }
    v
}

fn rig_with(keys: &[u64], levels: u32, cached: u32) -> (Loopback, BTreeStore) {
    let rig = Loopback::new(LoopbackOptions {
        capacity_blocks: 1 << 18,
        ..LoopbackOptions::default()
    });
    let inode = build(&rig.store, "tree", keys, levels, value_for).unwrap();
    rig.sync_now();
    let store = BTreeStore::open(rig.client.clone(), inode, cached).unwrap();
    (rig, store)
}

#[test]
fn random_keysets_match_oracle_at_every_depth_and_cache_height() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for levels in 1..=4u32 {
        // Enough keys to make the depth feasible, few enough to stay fast.
        let n = match levels {
            1 => 20,
            2 => 50,
            3 => 400,
            _ => 3000,
        };
        let mut keys: Vec<u64> = (0..n * 3).collect();
        keys.shuffle(&mut rng);
        let mut keys: Vec<u64> = keys.into_iter().take(n as usize).collect();
        keys.sort_unstable();
        if solve_shape(keys.len() as u64, levels).is_err() {
            continue;
        }
        for cached in 0..=levels {
            let (_rig, store) = rig_with(&keys, levels, cached);
            for _ in 0..60 {
                let probe = rng.random_range(0..n * 3 + 10);
                let want = keys.binary_search(&probe).ok().map(|_| value_for(probe));
                for mode in [Mode::Baseline, Mode::Pushdown] {
                    let (got, _) = store.get_point(probe, mode).unwrap();
                    assert_eq!(
                        got, want,
                        "levels {levels} cached {cached} {mode:?} key {probe}"
                    );
                }
            }
        }
    }
}

#[test]
fn round_trip_law_holds_at_every_cache_height() {
    // One lookup is node_levels reads plus one value read. Caching the top
    // h levels removes h round trips from the baseline; pushdown is always
    // one round trip with the same number of device reads.
    let keys: Vec<u64> = (0..3000u64).map(|k| k * 2 + 1).collect();
    let levels = 4u32;
    for cached in 0..=levels {
        let (_rig, store) = rig_with(&keys, levels, cached);
        let (v, base) = store.get_point(2001, Mode::Baseline).unwrap();
        assert_eq!(v, Some(value_for(2001)));
        assert_eq!(base.round_trips, levels - cached + 1);
        assert_eq!(base.resubmissions, 0);

        let (v, push) = store.get_point(2001, Mode::Pushdown).unwrap();
        assert_eq!(v, Some(value_for(2001)));
        assert_eq!(push.round_trips, 1);
        assert_eq!(push.device_reads, levels - cached + 1);
        assert_eq!(push.resubmissions, levels - cached);
        assert!(
            push.bytes_received < base.bytes_received,
            "pushdown must move fewer bytes"
        );
    }
}

#[test]
fn ranges_match_oracle_including_misaligned_bounds() {
    let keys: Vec<u64> = (0..2500u64).map(|k| k * 3).collect();
    let (_rig, store) = rig_with(&keys, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let a = rng.random_range(0..7600u64);
        let b = rng.random_range(0..7600u64);
        let (lo, hi) = (a.min(b), a.max(b));
        let want: Vec<(u64, Vec<u8>)> = keys
            .iter()
            .filter(|&&k| (lo..=hi).contains(&k))
            .map(|&k| (k, value_for(k)))
            .collect();
        for mode in [Mode::Baseline, Mode::Pushdown] {
            let (got, _) = store.get_range(lo, hi, mode).unwrap();
            assert_eq!(got, want, "[{lo}, {hi}] {mode:?}");
        }
    }
}

#[test]
fn continuation_rounds_equal_budget_splits() {
    let keys: Vec<u64> = (0..4000u64).collect();
    let (_rig, mut store) = rig_with(&keys, 3, 0);
    // Size the scratch for exactly ten pairs per chained request.
    let pairs_per_request = 10u64;
    store.range_budget =
        RANGE_MIN_SCRATCH_LEN + (pairs_per_request as usize - 1) * RANGE_PAIR_LEN;
    let (got, stats) = store.get_range(500, 1499, Mode::Pushdown).unwrap();
    assert_eq!(got.len(), 1000);
    assert!(got.iter().zip(500..).all(|((k, v), want)| *k == want && *v == value_for(want)));
    // The scan phase splits on scratch capacity; the value phase then reads
    // each log block once. Keys are dense so value k sits at byte k*64 of
    // the (block-aligned) log.
    let scan_requests = 1000u64.div_ceil(pairs_per_request);
    let v = VALUE_LEN as u64;
    let bs = NODE_SIZE as u64;
    let log_blocks = (1499 * v + v - 1) / bs - 500 * v / bs + 1;
    assert_eq!(stats.round_trips as u64, scan_requests + log_blocks);
}

#[test]
fn infeasible_shapes_are_rejected_cleanly() {
    assert!(solve_shape(0, 3).is_err());
    assert!(solve_shape(10, 0).is_err());
    assert!(solve_shape(2, 5).is_err(), "2 keys cannot span 5 levels");
    assert!(solve_shape(100, 17).is_err(), "beyond the format's level cap");
    // Feasible edge: minimum keys for a given height still builds.
    let shape = solve_shape(4, 2).unwrap();
    assert_eq!(shape.level_counts[0], 1);
}
