mod common;

use aeon_core::atlas::Quantization;
use aeon_core::kernels::{dot_f32, quantize};
use aeon_core::slb::{route, Lookup, Slb, SlbConfig, SlbVector, SLB_SHARDS};
use common::{engine, forest, nudge, random_unit, rng};
use proptest::prelude::*;
use rand::Rng;

fn ids_for_shard(shard: usize, n: usize) -> Vec<String> {
    (0..).map(|i| format!("session-{i}")).filter(|s| route(s).unwrap() == shard).take(n).collect()
}

#[test]
fn comparisons_equal_occupancy() {
    let slb = Slb::new(SlbConfig::new(32)).unwrap();
    let mut r = rng(1);
    let mut filled = 0;
    for occupancy in [16, 32, 64] {
        while filled < occupancy {
            slb.insert("sweep", SlbVector::Fp32(&random_unit(&mut r, 32)), filled as u64 + 1).unwrap();
            filled += 1;
        }
        assert_eq!(slb.occupancy(route("sweep").unwrap()), occupancy);
        for _ in 0..10 {
            let l = slb.lookup("sweep", &random_unit(&mut r, 32)).unwrap();
            assert_eq!(l.comparisons() as usize, occupancy);
        }
    }
}

#[test]
fn routing_spreads_sessions_evenly() {
    let mut load = [0u32; SLB_SHARDS];
    let mut r = rng(2);
    for _ in 0..100_000 {
        let id: String = (0..12).map(|_| r.gen_range(b'a'..=b'z') as char).collect();
        load[route(&id).unwrap()] += 1;
    }
    let mean = 100_000.0 / SLB_SHARDS as f64;
    let max = *load.iter().max().unwrap() as f64;
    assert!(max <= 2.0 * mean, "max shard load {max} vs mean {mean}");
}

#[test]
fn int8_insert_scores_close_to_fp32() {
    let slb = Slb::new(SlbConfig::new(768)).unwrap();
    let mut r = rng(3);
    for i in 0..50 {
        let v = random_unit(&mut r, 768);
        let q = quantize(&v).unwrap();
        let session = format!("s{i}");
        slb.insert(&session, SlbVector::Int8(&q), i + 1).unwrap();
        match slb.lookup(&session, &v).unwrap() {
            Lookup::Hit { similarity, node_id, .. } => {
                assert_eq!(node_id, i + 1);
                assert!((similarity - dot_f32(&v, &v)).abs() < 0.01);
            }
            miss => panic!("{miss:?}"),
        }
    }
}

#[test]
fn repeated_queries_hit() {
    let slb = Slb::new(SlbConfig::new(16)).unwrap();
    let mut r = rng(4);
    let qs: Vec<Vec<f32>> = (0..20).map(|_| random_unit(&mut r, 16)).collect();
    for (i, q) in qs.iter().enumerate() {
        assert!(!slb.lookup("repeat", q).unwrap().is_hit());
        slb.insert("repeat", SlbVector::Fp32(q), i as u64 + 1).unwrap();
    }
    slb.reset_stats();
    for _ in 0..50 {
        for (i, q) in qs.iter().enumerate() {
            assert_eq!(slb.lookup("repeat", q).unwrap().node_id(), Some(i as u64 + 1));
        }
    }
    assert_eq!(slb.stats().hit_rate(), 1.0);
}

#[test]
fn cached_queries_never_return_deleted_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), 16, Quantization::Fp32, false);
    let data = forest(100, 16, 5, 0.5, 5);
    for v in &data {
        e.atlas().insert(v).unwrap();
    }
    let first = e.query_cached("alice", &data[10]).unwrap();
    assert!(!first.hit);
    assert_eq!(first.node_id, 11);
    let again = e.query_cached("alice", &data[10]).unwrap();
    assert!(again.hit);
    assert_eq!(again.node_id, 11);
    e.atlas().tombstone(11).unwrap();
    let after = e.query_cached("alice", &data[10]).unwrap();
    assert!(!after.hit);
    assert_ne!(after.node_id, 11);
    assert_eq!(e.slb().stats().stale_dropped, 1);
}

#[test]
fn conversational_walk_mostly_hits() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), 64, Quantization::Int8, false);
    for v in forest(2000, 64, 20, 0.5, 6) {
        e.atlas().insert(&v).unwrap();
    }
    e.compact().unwrap();
    let mut r = rng(7);
    let mut q = random_unit(&mut r, 64);
    for _ in 0..5000 {
        q = if r.gen_bool(0.9) { nudge(&mut r, &q, 0.05) } else { random_unit(&mut r, 64) };
        e.query_cached("walker", &q).unwrap();
    }
    let rate = e.slb().stats().hit_rate();
    assert!(rate >= 0.85, "hit rate {rate}");
}

#[derive(Debug, Clone)]
enum Op {
    Insert(bool, u64, u64),
    Lookup(bool, u64),
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Interleaved traffic from two sessions on different shards leaves each
    /// shard exactly as that session's traffic alone would.
    #[test]
    fn sessions_on_different_shards_are_isolated(
        ops in proptest::collection::vec(prop_oneof![
            (any::<bool>(), 0u64..40, 1u64..30).prop_map(|(a, s, n)| Op::Insert(a, s, n)),
            (any::<bool>(), 0u64..40).prop_map(|(a, s)| Op::Lookup(a, s)),
        ], 1..200),
        shard_a in 0usize..SLB_SHARDS,
        offset in 1usize..SLB_SHARDS,
    ) {
        let shard_b = (shard_a + offset) % SLB_SHARDS;
        let a = ids_for_shard(shard_a, 1).remove(0);
        let b = ids_for_shard(shard_b, 1).remove(0);
        let vector = |seed: u64| random_unit(&mut rng(seed), 12);
        let run = |slb: &Slb, op: &Op| match *op {
            Op::Insert(_, seed, node) => {
                let sid = if matches!(op, Op::Insert(true, ..)) { &a } else { &b };
                slb.insert(sid, SlbVector::Fp32(&vector(seed)), node).unwrap();
            }
            Op::Lookup(first, seed) => {
                slb.lookup(if first { &a } else { &b }, &vector(seed)).unwrap();
            }
        };
        let is_a = |op: &Op| matches!(op, Op::Insert(true, ..) | Op::Lookup(true, _));

        let mixed = Slb::new(SlbConfig::new(12).with_hit_threshold(0.5)).unwrap();
        let only_a = Slb::new(SlbConfig::new(12).with_hit_threshold(0.5)).unwrap();
        let only_b = Slb::new(SlbConfig::new(12).with_hit_threshold(0.5)).unwrap();
        for op in &ops {
            run(&mixed, op);
            if is_a(op) { run(&only_a, op) } else { run(&only_b, op) }
        }
        prop_assert_eq!(mixed.shard_entries(shard_a), only_a.shard_entries(shard_a));
        prop_assert_eq!(mixed.shard_entries(shard_b), only_b.shard_entries(shard_b));
        for s in 0..SLB_SHARDS {
            if s != shard_a && s != shard_b {
                prop_assert_eq!(mixed.occupancy(s), 0);
            }
        }
    }

    #[test]
    fn occupancy_never_exceeds_capacity(seeds in proptest::collection::vec(0u64..1000, 1..200)) {
        let slb = Slb::new(SlbConfig::new(8)).unwrap();
        let shard = route("cap").unwrap();
        let mut distinct = std::collections::HashSet::new();
        for s in seeds {
            slb.insert("cap", SlbVector::Fp32(&random_unit(&mut rng(s), 8)), s + 1).unwrap();
            distinct.insert(s);
            prop_assert_eq!(slb.occupancy(shard), distinct.len().min(64));
        }
    }

    /// After a miss and an insert of the answer, the same query hits.
    #[test]
    fn miss_insert_then_hit(seed in any::<u64>(), tau in -0.99f32..0.999) {
        let slb = Slb::new(SlbConfig::new(16).with_hit_threshold(tau)).unwrap();
        let q = random_unit(&mut rng(seed), 16);
        let first = slb.lookup("s", &q).unwrap();
        prop_assert!(!first.is_hit());
        slb.insert("s", SlbVector::Fp32(&q), 5).unwrap();
        prop_assert_eq!(slb.lookup("s", &q).unwrap().node_id(), Some(5));
    }
}
