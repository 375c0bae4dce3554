//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line. Run with
//! `cargo test -p pushdown-bench --test acceptance -- --nocapture`.
//!
//! Counts and byte laws are asserted exactly; statistical properties use
//! wide deterministic bands (fixed seeds make every run identical).

use std::collections::HashMap;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pushdown_bench::runner::{run, BenchConfig, SystemKind};
use pushdown_bench::workload::{generate, value_bytes, Mix, OpKind, WorkloadSpec};
use pushdown_core::extent::Extent;
use pushdown_core::functions::btree::{
    lookup_scratch, parse_lookup_result, LookupResult, RANGE_MIN_SCRATCH_LEN, RANGE_PAIR_LEN,
};
use pushdown_core::functions::sst::STAGE_DATA;
use pushdown_core::functions::FN_BTREE_LOOKUP;
use pushdown_core::host::{AbortReason, PushdownStatus};
use pushdown_core::loopback::{Loopback, LoopbackOptions};
use pushdown_core::wire::{
    decode_frame, decode_sync_ack, decode_sync_record, encode_frame, encode_sync_ack,
    encode_sync_record, FdVersion, Message, PushdownCapsule, PushdownResponse, ReadCapsule,
    ReadResponse, Status, SyncAck, SyncRecord, MAX_FRAME_LEN, MAX_PUSHDOWN_FDS, MAX_SCRATCH_LEN,
};
use pushdown_kv::btree::{build, solve_shape, BTreeStore, NODE_SIZE, VALUE_LEN};
use pushdown_kv::lsm::{CachePolicy, LsmConfig, LsmStore};
use pushdown_kv::Mode;

fn criterion<F: FnOnce()>(n: u32, name: &str, f: F) {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => println!("acceptance {n} ({name}): PASS"),
        Err(payload) => {
            println!("acceptance {n} ({name}): FAIL");
            resume_unwind(payload);
        }
    }
}

// ---------------------------------------------------------------- 1

/// Depth-7 read chain (six node levels plus the value log), nothing cached:
/// baseline pays one round trip per hop, pushdown pays one total with the
/// hops turned into target-side resubmissions.
#[test]
fn criterion_1_round_trip_law() {
    criterion(1, "round-trip law", || {
        let t0 = Instant::now();
        let lb = Loopback::new(LoopbackOptions::default());
        let n_keys = 20_000u64;
        let levels = 6u32;
        let keys: Vec<u64> = (0..n_keys).collect();
        let inode =
            build(&lb.store, "law-tree", &keys, levels, |k| value_bytes(k, 0, VALUE_LEN)).unwrap();
        lb.sync.drain_until_clean(64).unwrap();
        let store = BTreeStore::open(lb.client.clone(), inode, 0).unwrap();
        assert_eq!(store.node_levels(), levels);

        let depth = levels + 1; // node hops plus the value-log hop
        let sample: Vec<u64> =
            (0..n_keys).step_by(997).chain([0, n_keys - 1]).collect();
        for &key in &sample {
            let want = value_bytes(key, 0, VALUE_LEN);

            let (v, st) = store.get_point(key, Mode::Baseline).unwrap();
            assert_eq!(v.as_deref(), Some(&want[..]), "baseline key {key}");
            assert_eq!(st.round_trips, depth, "baseline key {key}");
            assert_eq!(st.resubmissions, 0, "baseline key {key}");

            let (v, st) = store.get_point(key, Mode::Pushdown).unwrap();
            assert_eq!(v.as_deref(), Some(&want[..]), "pushdown key {key}");
            assert_eq!(st.round_trips, 1, "pushdown key {key}");
            assert_eq!(st.resubmissions, depth - 1, "pushdown key {key}");
            assert_eq!(st.device_reads, depth, "pushdown key {key}");
        }
        assert!(t0.elapsed() < Duration::from_secs(5));
    });
}

// ---------------------------------------------------------------- 2

/// Same tree, 10^4 uniform lookups in each mode: the pushdown path must
/// return no more than a quarter of the baseline's bytes (64-byte results
/// versus seven 512-byte blocks), with identical answers.
#[test]
fn criterion_2_byte_savings() {
    criterion(2, "byte savings", || {
        let t0 = Instant::now();
        let spec = WorkloadSpec::new(Mix::UniformRead, 20_000, 10_000, 100, 424_242);
        let mut cfg = BenchConfig::new(spec, SystemKind::Btree, Mode::Baseline);
        cfg.cache_bytes = 0;
        cfg.tree_levels = Some(6);
        let base = run(&cfg).unwrap();
        cfg.mode = Mode::Pushdown;
        let push = run(&cfg).unwrap();

        assert_eq!(base.result_digest, push.result_digest);
        assert_eq!(base.read_absent, 0);
        assert!(
            push.bytes_received * 4 <= base.bytes_received,
            "pushdown received {} of baseline {} bytes",
            push.bytes_received,
            base.bytes_received
        );
        assert!(t0.elapsed() < Duration::from_secs(30));
    });
}

// ---------------------------------------------------------------- 3

/// 20 seeds, every {cache} x {sampling} cell, 10^4 mixed ops per cell:
/// baseline and pushdown stores run in lockstep against an in-memory
/// oracle; every get must match it in both modes.
#[test]
fn criterion_3_oracle_equivalence() {
    criterion(3, "oracle equivalence", || {
        let t0 = Instant::now();
        let caches = [0u64, 64 << 10, 8 << 20];
        let samplings = [0.0f64, 0.01, 1.0];
        for seed in 0..20u64 {
            for &cache in &caches {
                for &sampling in &samplings {
                    oracle_cell(seed, cache, sampling);
                }
            }
        }
        assert!(t0.elapsed() < Duration::from_secs(300));
    });
}

fn oracle_cell(seed: u64, cache: u64, sampling: f64) {
    let mk = |mode: Mode| {
        let lb = Loopback::new(LoopbackOptions::default());
        let cfg = LsmConfig {
            mode,
            block_cache_bytes: cache as usize,
            row_cache_entries: if cache == 0 { 0 } else { 256 },
            sampling_rate: sampling,
            sampling_seed: seed ^ 0xace5,
            bloom_bits_per_key: if seed % 2 == 1 { 8 } else { 0 },
            pin_index: seed % 4 != 1,
            memtable_bytes: 16 << 10,
            l0_trigger: 2,
            l1_bytes: 128 << 10,
            file_bytes: 32 << 10,
            data_block_bytes: 1024,
            ..LsmConfig::default()
        };
        let store = LsmStore::new(lb.client.clone(), cfg);
        (lb, store)
    };
    let (_lb_b, base) = mk(Mode::Baseline);
    let (_lb_p, push) = mk(Mode::Pushdown);

    let mut oracle: HashMap<u64, Vec<u8>> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) ^ (cache << 1) ^ sampling as u64);
    let keyspace = 800u64;
    for i in 0..10_000u64 {
        let roll = rng.random_range(0..100u32);
        let key = rng.random_range(0..keyspace);
        if roll < 35 {
            let len = 20 + 37 * rng.random_range(0..5usize);
            let v = value_bytes(key, i, len);
            base.put(key, &v).unwrap();
            push.put(key, &v).unwrap();
            oracle.insert(key, v);
        } else if roll < 45 {
            base.delete(key).unwrap();
            push.delete(key).unwrap();
            oracle.remove(&key);
        } else {
            let want = oracle.get(&key).cloned();
            let ctx = format!("seed {seed} cache {cache} sampling {sampling} op {i} key {key}");
            assert_eq!(base.get(key).unwrap(), want, "baseline {ctx}");
            assert_eq!(push.get(key).unwrap(), want, "pushdown {ctx}");
        }
    }
    // Full sweep at the end: every key, both modes.
    for key in 0..keyspace {
        let want = oracle.get(&key).cloned();
        assert_eq!(base.get(key).unwrap(), want, "final baseline key {key}");
        assert_eq!(push.get(key).unwrap(), want, "final pushdown key {key}");
    }
}

// ---------------------------------------------------------------- 4

/// 10^5 raw pushdown lookups race a mutator that continuously remaps one
/// tree and truncate-rewrites another (contents flip between two tagged
/// states). Completed results must match a state that existed; every
/// version abort must come back with the scratch fully zeroed.
#[test]
fn criterion_4_churn_safety() {
    criterion(4, "churn safety", || {
        let t0 = Instant::now();
        let lb = Loopback::new(LoopbackOptions {
            spawn_drainer: true,
            ..LoopbackOptions::default()
        });
        let n_a = 3000u64;
        let n_b = 2000u64;
        let keys_a: Vec<u64> = (0..n_a).collect();
        let keys_b: Vec<u64> = (0..n_b).collect();
        let inode_a =
            build(&lb.store, "churn-a", &keys_a, 3, |k| value_bytes(k, 0, VALUE_LEN)).unwrap();
        let inode_b =
            build(&lb.store, "churn-b", &keys_b, 3, |k| value_bytes(k, 0, VALUE_LEN)).unwrap();
        lb.sync.drain_until_clean(64).unwrap();

        // The value log of tree B starts right after the header + node
        // blocks; rewriting it whole keeps keys addressable.
        let shape_b = solve_shape(n_b, 3).unwrap();
        let node_blocks: u64 = 1 + shape_b.level_counts.iter().sum::<u64>();
        let log_offset_b = node_blocks * NODE_SIZE as u64;

        let stop = AtomicBool::new(false);
        let completed = AtomicU64::new(0);
        let version_aborts = AtomicU64::new(0);
        let pre_aborts = AtomicU64::new(0);
        let io_aborts = AtomicU64::new(0);
        let fallbacks = AtomicU64::new(0);

        std::thread::scope(|s| {
            let mutator = s.spawn(|| {
                let mut round = 0u64;
                let mut tag = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    std::thread::sleep(Duration::from_micros(200));
                    if round.is_multiple_of(2) {
                        lb.store.remap(inode_a).unwrap();
                    } else {
                        tag ^= 1;
                        let mut log = Vec::with_capacity((n_b as usize) * VALUE_LEN);
                        for k in 0..n_b {
                            log.extend_from_slice(&value_bytes(k, tag, VALUE_LEN));
                        }
                        lb.store.truncate(inode_b, log_offset_b).unwrap();
                        lb.store.append(inode_b, &log).unwrap();
                        if round % 6 == 5 {
                            lb.store.remap(inode_b).unwrap();
                        }
                    }
                    round += 1;
                }
            });

            let mut readers = Vec::new();
            for t in 0..4u64 {
                let (completed, version_aborts, pre_aborts, io_aborts, fallbacks) =
                    (&completed, &version_aborts, &pre_aborts, &io_aborts, &fallbacks);
                let lb = &lb;
                readers.push(s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(0xC4 + t);
                    for _ in 0..25_000u32 {
                        let on_a = rng.random::<bool>();
                        let (inode, n) = if on_a { (inode_a, n_a) } else { (inode_b, n_b) };
                        let key = rng.random_range(0..n);
                        let mut scratch = lookup_scratch(key);
                        let reply = lb.client.read_pushdown(
                            &[inode],
                            0,
                            NODE_SIZE as u64,
                            NODE_SIZE as u64,
                            FN_BTREE_LOOKUP,
                            &mut scratch,
                        );
                        match reply.status {
                            PushdownStatus::Completed => {
                                let got = match parse_lookup_result(&scratch) {
                                    Some(LookupResult::Found(v)) => v,
                                    other => panic!("key {key} present but got {other:?}"),
                                };
                                let ok = if on_a {
                                    got == value_bytes(key, 0, VALUE_LEN)
                                } else {
                                    got == value_bytes(key, 0, VALUE_LEN)
                                        || got == value_bytes(key, 1, VALUE_LEN)
                                };
                                assert!(ok, "key {key}: result matches no pinned state");
                                completed.fetch_add(1, Ordering::Relaxed);
                            }
                            PushdownStatus::TargetFallback => {
                                fallbacks.fetch_add(1, Ordering::Relaxed);
                            }
                            PushdownStatus::Aborted(AbortReason::PostCheckVersion) => {
                                // A remap raced the in-flight request; the
                                // poisoned result must have been wiped.
                                assert!(
                                    scratch.iter().all(|&b| b == 0),
                                    "mid-flight remap left scratch bytes behind"
                                );
                                version_aborts.fetch_add(1, Ordering::Relaxed);
                            }
                            PushdownStatus::Aborted(
                                AbortReason::PreCheckVersion | AbortReason::TargetVersion,
                            ) => {
                                // Rejected before execution; nothing to wipe.
                                pre_aborts.fetch_add(1, Ordering::Relaxed);
                            }
                            PushdownStatus::Aborted(
                                AbortReason::TargetIo | AbortReason::FunctionError,
                            ) => {
                                // Reads that land in the truncate-rewrite gap.
                                io_aborts.fetch_add(1, Ordering::Relaxed);
                            }
                            PushdownStatus::Aborted(other) => {
                                panic!("unexpected abort {other:?}")
                            }
                        }
                    }
                }));
            }
            for r in readers {
                r.join().unwrap();
            }
            stop.store(true, Ordering::Relaxed);
            mutator.join().unwrap();
        });

        let done = completed.load(Ordering::Relaxed);
        let post = version_aborts.load(Ordering::Relaxed);
        let total = done
            + post
            + pre_aborts.load(Ordering::Relaxed)
            + io_aborts.load(Ordering::Relaxed)
            + fallbacks.load(Ordering::Relaxed);
        assert_eq!(total, 100_000);
        assert!(done > 0, "no read ever completed");
        assert!(post > 0, "churn never aborted a request mid-flight");
        assert!(t0.elapsed() < Duration::from_secs(300));
    });
}

// ---------------------------------------------------------------- 5

/// Three overlapping table generations with mixed caching: the query plan
/// must list exactly the uncached, unfiltered data blocks newest-first,
/// and a fully cached lookup must produce zero remote messages.
#[test]
fn criterion_5_query_splitting() {
    criterion(5, "query splitting", || {
        let k = 500u64;

        // Fixture A: the middle generation covers the key range but not
        // the key itself; its Bloom filter keeps it out of the plan.
        {
            let lb = Loopback::new(LoopbackOptions::default());
            let store = LsmStore::new(lb.client.clone(), fixture_cfg(16));
            let v1 = value_bytes(k, 1, 80);
            let v3 = value_bytes(k, 3, 80);

            store.put(k, &v1).unwrap();
            store.put(100, &value_bytes(100, 1, 80)).unwrap();
            store.put(900, &value_bytes(900, 1, 80)).unwrap();
            store.flush().unwrap();
            let plan = store.plan_for(k).unwrap();
            assert_eq!(plan.probes.len(), 1);
            assert_eq!(plan.probes[0].stage, STAGE_DATA);
            let gen1 = plan.probes[0].table.inode;
            assert_eq!(store.get(k).unwrap().as_deref(), Some(&v1[..])); // warms gen1

            store.put(k - 1, &value_bytes(k - 1, 2, 80)).unwrap();
            store.put(k + 1, &value_bytes(k + 1, 2, 80)).unwrap();
            store.flush().unwrap();
            let plan = store.plan_for(k).unwrap();
            assert!(plan.probes.is_empty(), "filtered generation must not be probed");
            assert_eq!(plan.backstop, Some(Some(v1.clone())));

            store.put(k, &v3).unwrap();
            store.put(101, &value_bytes(101, 3, 80)).unwrap();
            store.flush().unwrap();
            let plan = store.plan_for(k).unwrap();
            assert_eq!(plan.probes.len(), 1, "exactly the one uncached, unfiltered block");
            assert_eq!(plan.probes[0].stage, STAGE_DATA);
            assert_ne!(plan.probes[0].table.inode, gen1);
            assert_eq!(plan.backstop, Some(Some(v1.clone())));
            assert_eq!(store.get(k).unwrap().as_deref(), Some(&v3[..])); // warms gen3

            // Fully cached now: the plan is empty and a get moves no bytes.
            let plan = store.plan_for(k).unwrap();
            assert_eq!(plan.local_answer(), Some(Some(v3.clone())));
            let s0 = store.stats();
            let wire0 = lb.client.counters();
            assert_eq!(store.get(k).unwrap().as_deref(), Some(&v3[..]));
            assert_eq!(lb.client.counters(), wire0, "fully cached get touched the wire");
            let s1 = store.stats();
            assert_eq!(s1.local_answers, s0.local_answers + 1);
        }

        // Fixture B: no filters; three generations all holding the key,
        // oldest one cached. The plan must probe the two uncached
        // generations newest-first and stop at the cached backstop.
        {
            let lb = Loopback::new(LoopbackOptions::default());
            let store = LsmStore::new(lb.client.clone(), fixture_cfg(0));
            let w1 = value_bytes(k, 11, 80);
            let w2 = value_bytes(k, 12, 80);
            let w3 = value_bytes(k, 13, 80);

            store.put(k, &w1).unwrap();
            store.put(0, &value_bytes(0, 11, 80)).unwrap();
            store.put(999, &value_bytes(999, 11, 80)).unwrap();
            store.flush().unwrap();
            assert_eq!(store.get(k).unwrap().as_deref(), Some(&w1[..])); // warms gen1

            store.put(k, &w2).unwrap();
            store.put(1, &value_bytes(1, 12, 80)).unwrap();
            store.flush().unwrap();
            let plan = store.plan_for(k).unwrap();
            assert_eq!(plan.probes.len(), 1);
            let gen2 = plan.probes[0].table.inode;

            store.put(k, &w3).unwrap();
            store.put(2, &value_bytes(2, 13, 80)).unwrap();
            store.flush().unwrap();
            let plan = store.plan_for(k).unwrap();
            assert_eq!(plan.probes.len(), 2, "both uncached generations planned");
            assert_eq!(plan.probes[1].table.inode, gen2, "probes must run newest-first");
            assert_ne!(plan.probes[0].table.inode, gen2);
            assert!(plan.probes.iter().all(|p| p.stage == STAGE_DATA));
            assert_eq!(plan.backstop, Some(Some(w1.clone())));
            assert_eq!(store.get(k).unwrap().as_deref(), Some(&w3[..]));
        }
    });
}

fn fixture_cfg(bloom_bits: u32) -> LsmConfig {
    LsmConfig {
        mode: Mode::Pushdown,
        // Sampled gets run block-wise and warm the cache deliberately.
        sampling_rate: 1.0,
        row_cache_entries: 0,
        bloom_bits_per_key: bloom_bits,
        l0_trigger: 100,
        ..LsmConfig::default()
    }
}

// ---------------------------------------------------------------- 6

/// Sampling statistics: at rate 0.01 the sampled fraction of 10^5 gets
/// stays within [0.0085, 0.0115]; at rate 1.0 the pushdown store's wire
/// traffic equals the baseline store's byte for byte.
#[test]
fn criterion_6_sampling_statistics() {
    criterion(6, "sampling statistics", || {
        // Part 1: fraction at the default 1% rate. No caching, so every
        // get reaches the tables and makes exactly one sampling decision.
        {
            let lb = Loopback::new(LoopbackOptions::default());
            let cfg = LsmConfig {
                mode: Mode::Pushdown,
                cache_policy: CachePolicy::NoDataCache,
                block_cache_bytes: 0,
                row_cache_entries: 0,
                sampling_rate: 0.01,
                sampling_seed: 0x5a3c,
                ..LsmConfig::default()
            };
            let store = LsmStore::new(lb.client.clone(), cfg);
            let n_keys = 2000u64;
            for key in 0..n_keys {
                store.put(key, &value_bytes(key, 0, 100)).unwrap();
            }
            store.flush().unwrap();
            lb.sync.drain_until_clean(64).unwrap();

            let s0 = store.stats();
            let mut rng = ChaCha8Rng::seed_from_u64(0x60);
            let n_gets = 100_000u64;
            for _ in 0..n_gets {
                let key = rng.random_range(0..n_keys);
                assert!(store.get(key).unwrap().is_some());
            }
            let s1 = store.stats();
            assert_eq!(s1.sampling_decisions - s0.sampling_decisions, n_gets);
            let fraction = (s1.sampled_reads - s0.sampled_reads) as f64 / n_gets as f64;
            assert!(
                (0.0085..=0.0115).contains(&fraction),
                "sampled fraction {fraction} outside [0.0085, 0.0115]"
            );
        }

        // Part 2: rate 1.0 diverts every eligible get to the block-wise
        // path, which must reproduce baseline wire traffic exactly.
        {
            let mk = |mode: Mode, rate: f64| {
                let lb = Loopback::new(LoopbackOptions::default());
                let cfg = LsmConfig {
                    mode,
                    sampling_rate: rate,
                    sampling_seed: 7,
                    ..LsmConfig::default()
                };
                let store = LsmStore::new(lb.client.clone(), cfg);
                for key in 0..3000u64 {
                    store.put(key, &value_bytes(key, 0, 100)).unwrap();
                }
                store.flush().unwrap();
                lb.sync.drain_until_clean(64).unwrap();
                (lb, store)
            };
            let (_lb_b, base) = mk(Mode::Baseline, 0.0);
            let (_lb_p, push) = mk(Mode::Pushdown, 1.0);

            let b0 = base.stats();
            let p0 = push.stats();
            let mut rng = ChaCha8Rng::seed_from_u64(0x61);
            for _ in 0..20_000u32 {
                let key = rng.random_range(0..3000u64);
                assert_eq!(base.get(key).unwrap(), push.get(key).unwrap(), "key {key}");
            }
            let b = base.stats();
            let p = push.stats();
            assert_eq!(
                (b.round_trips - b0.round_trips, b.bytes_sent - b0.bytes_sent, b.bytes_received - b0.bytes_received),
                (p.round_trips - p0.round_trips, p.bytes_sent - p0.bytes_sent, p.bytes_received - p0.bytes_received),
                "rate 1.0 must replay baseline traffic exactly"
            );
        }
    });
}

// ---------------------------------------------------------------- 7

/// Insert-heavy skewed run with extent-map shipping deferred past every
/// publish: each flush/compaction leaves the target's map stale until a
/// reader trips on it, so mismatch recovery is exercised on every publish.
/// Answers must stay correct throughout and mismatches must stay rare.
#[test]
fn criterion_7_mismatch_recovery() {
    criterion(7, "mismatch recovery", || {
        let lb = Loopback::new(LoopbackOptions::default());
        let cfg = LsmConfig {
            mode: Mode::Pushdown,
            memtable_bytes: 16 << 10,
            l0_trigger: 2,
            // Publishes do not ship the new extent maps (and there is no
            // background daemon), so the first read probing a fresh table
            // always sees the version race and must recover.
            sync_on_publish: false,
            // No row cache: reads right after a publish must probe the
            // fresh tables instead of replaying cached answers.
            row_cache_entries: 0,
            ..LsmConfig::default()
        };
        let store = LsmStore::new(lb.client.clone(), cfg);

        let n_keys = 500u64;
        let n_ops = 50_000u64;
        let spec = WorkloadSpec::new(Mix::YcsbD, n_keys, n_ops, 100, 0x07);
        let ops = generate(&spec);

        let mut oracle: HashMap<u64, Vec<u8>> = HashMap::new();
        for key in 0..n_keys {
            let v = value_bytes(key, 0, 100);
            store.put(key, &v).unwrap();
            oracle.insert(key, v);
        }
        store.flush().unwrap();

        let s0 = store.stats();
        for (i, op) in ops.iter().enumerate() {
            match op.kind {
                OpKind::Read => {
                    let want = oracle.get(&op.key).cloned();
                    assert_eq!(store.get(op.key).unwrap(), want, "op {i} key {}", op.key);
                }
                _ => {
                    let v = value_bytes(op.key, i as u64 + 1, 100);
                    store.put(op.key, &v).unwrap();
                    oracle.insert(op.key, v);
                }
            }
        }
        let s1 = store.stats();
        let retries = s1.churn_retries - s0.churn_retries;
        let publishes = (s1.flushes - s0.flushes) + (s1.compactions - s0.compactions);
        assert!(publishes > 0, "workload never published a table");
        assert!(retries >= 1, "no read ever tripped on a stale extent map");
        assert!(
            (retries as f64) < 0.005 * n_ops as f64,
            "{retries} mismatch retries over {n_ops} ops exceeds 0.5%"
        );
    });
}

// ---------------------------------------------------------------- 8

/// Codec fuzz: a million hostile frames decode without panicking or
/// trusting claimed lengths, and structured messages survive round trips.
#[test]
fn criterion_8_codec_robustness() {
    criterion(8, "codec robustness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x08);

        // Oversized or lying length prefixes must fail fast.
        let mut oversize = (MAX_FRAME_LEN + 1).to_le_bytes().to_vec();
        oversize.extend_from_slice(&[0u8; 32]);
        assert!(decode_frame(&oversize).is_err());
        let mut lying = MAX_FRAME_LEN.to_le_bytes().to_vec();
        lying.extend_from_slice(&[1u8; 8]); // claims 16 MiB, carries 8 bytes
        assert!(decode_frame(&lying).is_err());
        assert!(decode_frame(&[]).is_err());

        // Random garbage and bit-flipped real frames: any Result is fine,
        // panics and runaway allocations are not.
        let pool: Vec<Vec<u8>> =
            (0..32).map(|_| encode_frame(&rand_message(&mut rng)).unwrap()).collect();
        for i in 0..1_000_000u32 {
            if i % 2 == 0 {
                let len = rng.random_range(0..200usize);
                let buf: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                let _ = decode_frame(&buf);
            } else {
                let mut buf = pool[rng.random_range(0..pool.len())].clone();
                for _ in 0..rng.random_range(1..4usize) {
                    let at = rng.random_range(0..buf.len());
                    buf[at] ^= 1 << rng.random_range(0..8u32);
                }
                let _ = decode_frame(&buf);
                let cut = rng.random_range(0..buf.len());
                let _ = decode_frame(&buf[..cut]);
            }
        }

        // Structured round trips.
        for _ in 0..100_000u32 {
            let msg = rand_message(&mut rng);
            let bytes = encode_frame(&msg).unwrap();
            let (back, used) = decode_frame(&bytes).unwrap();
            assert_eq!(used, bytes.len());
            assert_eq!(back, msg);

            let rec = rand_sync_record(&mut rng);
            let bytes = encode_sync_record(&rec).unwrap();
            let (back, used) = decode_sync_record(&bytes).unwrap();
            assert_eq!(used, bytes.len());
            assert_eq!(back, rec);

            let ack = SyncAck { inode: rng.random(), version: rng.random() };
            let bytes = encode_sync_ack(&ack);
            let (back, used) = decode_sync_ack(&bytes).unwrap();
            assert_eq!(used, bytes.len());
            assert_eq!(back, ack);
        }

        // Limits hold at one or the other end of the pipe.
        let fat = Message::Pushdown(PushdownCapsule {
            request_id: 1,
            function_id: 2,
            fds: (0..MAX_PUSHDOWN_FDS as u64 + 1)
                .map(|i| FdVersion { inode: i, version: 1 })
                .collect(),
            initial_fd: 0,
            offset: 0,
            length: 512,
            scratch: vec![0; 64],
        });
        match encode_frame(&fat) {
            Err(_) => {}
            Ok(bytes) => assert!(decode_frame(&bytes).is_err()),
        }
        let wide = Message::Pushdown(PushdownCapsule {
            request_id: 1,
            function_id: 2,
            fds: vec![FdVersion { inode: 1, version: 1 }],
            initial_fd: 0,
            offset: 0,
            length: 512,
            scratch: vec![0; MAX_SCRATCH_LEN + 1],
        });
        match encode_frame(&wide) {
            Err(_) => {}
            Ok(bytes) => assert!(decode_frame(&bytes).is_err()),
        }
    });
}

fn rand_status(rng: &mut ChaCha8Rng) -> Status {
    match rng.random_range(0..6u32) {
        0 => Status::Ok,
        1 => Status::VersionMismatch,
        2 => Status::FunctionFallback,
        3 => Status::FunctionError,
        4 => Status::IoError,
        _ => Status::LimitExceeded,
    }
}

fn rand_bytes(rng: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let len = rng.random_range(0..=max);
    (0..len).map(|_| rng.random()).collect()
}

fn rand_message(rng: &mut ChaCha8Rng) -> Message {
    match rng.random_range(0..4u32) {
        0 => Message::Read(ReadCapsule {
            request_id: rng.random(),
            inode: rng.random(),
            expected_version: rng.random(),
            offset: rng.random(),
            length: rng.random_range(0..1 << 20),
        }),
        1 => {
            let status = rand_status(rng);
            Message::ReadResp(ReadResponse {
                request_id: rng.random(),
                status,
                data: if status == Status::Ok { rand_bytes(rng, 600) } else { Vec::new() },
            })
        }
        2 => Message::Pushdown(PushdownCapsule {
            request_id: rng.random(),
            function_id: rng.random_range(0..8),
            fds: (0..rng.random_range(1..=MAX_PUSHDOWN_FDS))
                .map(|_| FdVersion { inode: rng.random(), version: rng.random() })
                .collect(),
            initial_fd: rng.random_range(0..MAX_PUSHDOWN_FDS as u8),
            offset: rng.random(),
            length: rng.random_range(0..1 << 16),
            scratch: rand_bytes(rng, 600),
        }),
        _ => {
            let status = rand_status(rng);
            Message::PushdownResp(PushdownResponse {
                request_id: rng.random(),
                status,
                resubmissions: rng.random_range(0..100),
                device_reads: rng.random_range(0..100),
                scratch: (status == Status::Ok).then(|| rand_bytes(rng, 600)),
            })
        }
    }
}

fn rand_sync_record(rng: &mut ChaCha8Rng) -> SyncRecord {
    let extents = (0..rng.random_range(0..24usize))
        .map(|_| Extent {
            file_offset: rng.random(),
            device_block: rng.random(),
            length_blocks: rng.random_range(1..1 << 16),
        })
        .collect();
    SyncRecord {
        inode: rng.random(),
        version: rng.random(),
        file_length: rng.random(),
        extents,
    }
}

// ---------------------------------------------------------------- 9

/// 10^3 random inclusive ranges against an oracle scan, with a scratch
/// budget small enough to force continuation on most spans; round trips
/// must match the split/value-read law exactly.
#[test]
fn criterion_9_range_queries() {
    criterion(9, "range queries", || {
        let lb = Loopback::new(LoopbackOptions::default());
        let n_keys = 4000u64;
        let keys: Vec<u64> = (0..n_keys).collect();
        let inode =
            build(&lb.store, "range-tree", &keys, 3, |k| value_bytes(k, 0, VALUE_LEN)).unwrap();
        lb.sync.drain_until_clean(64).unwrap();
        let mut store = BTreeStore::open(lb.client.clone(), inode, 1).unwrap();
        // Five pairs per chained request.
        let per_request = 5u64;
        store.range_budget =
            RANGE_MIN_SCRATCH_LEN + (per_request as usize - 1) * RANGE_PAIR_LEN;

        let v = VALUE_LEN as u64;
        let bs = NODE_SIZE as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(0x09);
        let mut resumed = 0u32;
        for q in 0..1000u32 {
            let lo = rng.random_range(0..n_keys);
            let span = rng.random_range(0..3000u64);
            let hi = (lo + span).min(n_keys - 1);

            let (pairs, stats) = store.get_range(lo, hi, Mode::Pushdown).unwrap();
            let count = hi - lo + 1;
            assert_eq!(pairs.len() as u64, count, "query {q} [{lo}, {hi}]");
            for (i, (pk, pv)) in pairs.iter().enumerate() {
                let want_key = lo + i as u64;
                assert_eq!(*pk, want_key, "query {q}");
                assert_eq!(*pv, value_bytes(want_key, 0, VALUE_LEN), "query {q}");
            }

            // Exact law: ceil(count / per_request) scan requests, then one
            // plain read per touched value-log block.
            let scan_requests = count.div_ceil(per_request);
            let log_blocks = (hi * v + v - 1) / bs - (lo * v) / bs + 1;
            assert_eq!(
                stats.round_trips as u64,
                scan_requests + log_blocks,
                "query {q} [{lo}, {hi}]"
            );
            if scan_requests > 1 {
                resumed += 1;
            }

            let (base_pairs, _) = store.get_range(lo, hi, Mode::Baseline).unwrap();
            assert_eq!(base_pairs, pairs, "query {q} mode mismatch");
        }
        assert!(resumed > 0, "budget never forced a continuation");
    });
}
