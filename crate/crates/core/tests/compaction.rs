mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use aeon_core::atlas::{AtlasParams, Quantization};
use aeon_core::trace::EventKind;
use aeon_core::{Engine, EngineConfig};
use common::{engine, forest, nudge, random_unit, rng};

/// Sorted (id, vector bits, metadata) of every live node.
fn live_snapshot(e: &Engine, max_id: u64) -> BTreeMap<u64, (Vec<u32>, Vec<u8>)> {
    (1..=max_id)
        .filter_map(|id| {
            let v = e.atlas().get_vector(id)?;
            let m = e.atlas().get_metadata(id)?;
            Some((id, (v.iter().map(|x| x.to_bits()).collect(), m)))
        })
        .collect()
}

#[test]
fn empty_compaction_produces_an_empty_generation() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), 8, Quantization::Fp32, true);
    let s = e.compact().unwrap();
    assert_eq!((s.generation, s.nodes_copied, s.events_copied, s.blobs_copied), (2, 0, 0, 0));
    assert_eq!(e.wal().len(), 0);
    assert_eq!(e.atlas().stats().node_count, 0);
    assert!(dir.path().join("atlas_gen2.bin").exists());
    drop(e);
    assert!(!dir.path().join("atlas_gen1.bin").exists());
}

#[test]
fn live_data_and_answers_are_preserved() {
    for q in [Quantization::Fp32, Quantization::Int8] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EngineConfig {
            atlas: AtlasParams::new(32, q).unwrap().with_metadata_bytes(320).unwrap(),
            ..EngineConfig::new(32, q).unwrap()
        };
        let e = Engine::create(dir.path(), cfg).unwrap();
        let data = forest(10_000, 32, 50, 0.5, 1);
        for (i, v) in data.iter().enumerate() {
            e.atlas().insert_with_metadata(v, &(i as u32).to_le_bytes()).unwrap();
        }
        e.compact().unwrap();
        for id in (1..=10_000u64).filter(|id| id % 5 < 2) {
            e.atlas().tombstone(id).unwrap();
        }
        let before = live_snapshot(&e, 10_000);
        assert_eq!(before.len(), 6000);
        let mut r = rng(2);
        let queries: Vec<Vec<f32>> = (0..1000).map(|i| nudge(&mut r, &data[(i * 7) % 10_000], 0.3)).collect();
        let answers: Vec<u64> = queries.iter().map(|q| e.atlas().flat_scan(q).unwrap().id).collect();

        let s = e.compact().unwrap();
        assert_eq!(s.nodes_copied, 6000);
        assert_eq!(e.atlas().stats().node_count, 6000);
        assert_eq!(live_snapshot(&e, 10_000), before);
        for (q, a) in queries.iter().zip(&answers) {
            assert_eq!(e.atlas().flat_scan(q).unwrap().id, *a);
        }
        // Only live nodes were written.
        let sealed = std::fs::metadata(e.atlas().file_path()).unwrap().len();
        assert_eq!(sealed, e.atlas().params().file_bytes(8192));
    }
}

#[test]
fn section_work_does_not_depend_on_size() {
    let mut freeze = Vec::new();
    let mut swap = Vec::new();
    for n in [1_000usize, 20_000] {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path(), 16, Quantization::Int8, false);
        let mut r = rng(n as u64);
        for i in 0..n {
            let v = random_unit(&mut r, 16);
            e.atlas().insert(&v).unwrap();
            if i % 4 == 0 {
                e.trace().append_event(EventKind::User, b"e", &v, &[]).unwrap();
            }
        }
        let s = e.compact().unwrap();
        freeze.push(s.freeze_ops);
        swap.push(s.swap_ops);
        let probe = e.freeze_window_probe();
        assert_eq!(probe.ops, 4);
    }
    assert_eq!(freeze[0], freeze[1]);
    assert_eq!(swap[0], swap[1]);
}

#[test]
fn writes_during_the_copy_land_in_the_next_delta() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), 16, Quantization::Fp32, true);
    let data = forest(6000, 16, 10, 0.5, 3);
    for v in &data[..5000] {
        e.atlas().insert(v).unwrap();
    }
    let done = AtomicBool::new(false);
    let inserted = AtomicU64::new(0);
    std::thread::scope(|s| {
        s.spawn(|| {
            for v in &data[5000..] {
                e.atlas().insert(v).unwrap();
                inserted.fetch_add(1, Ordering::Relaxed);
            }
            done.store(true, Ordering::Relaxed);
        });
        e.compact().unwrap();
    });
    assert!(done.load(Ordering::Relaxed));
    assert_eq!(e.atlas().stats().live_count, 6000);
    for (i, v) in data.iter().enumerate() {
        assert_eq!(e.atlas().flat_scan(v).unwrap().id, i as u64 + 1);
    }
    drop(e);
    let e = Engine::open(dir.path()).unwrap();
    assert_eq!(e.atlas().stats().live_count, 6000);
}

#[test]
fn readers_see_no_errors_or_regressions_across_compaction() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), 24, Quantization::Int8, false);
    let data = forest(8000, 24, 40, 0.5, 4);
    for v in &data {
        e.atlas().insert(v).unwrap();
    }
    let mut r = rng(5);
    for _ in 0..300 {
        e.trace().append_event(EventKind::User, b"history", &random_unit(&mut r, 24), &[]).unwrap();
    }
    for id in (1..=8000u64).step_by(3) {
        e.atlas().tombstone(id).unwrap();
    }
    let probes: Vec<(Vec<f32>, u64)> = data
        .iter()
        .step_by(17)
        .map(|v| (v.clone(), e.atlas().flat_scan(v).unwrap().id))
        .collect();
    let stop = AtomicBool::new(false);
    let bad = AtomicU64::new(0);
    let done = AtomicU64::new(0);
    std::thread::scope(|s| {
        for t in 0..3 {
            let (e, probes, stop, bad, done) = (&e, &probes, &stop, &bad, &done);
            s.spawn(move || {
                let mut i = t;
                while !stop.load(Ordering::Relaxed) {
                    let (q, want) = &probes[i % probes.len()];
                    match e.atlas().flat_scan(q) {
                        Ok(r) if r.id == *want => {}
                        _ => {
                            bad.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    if e.trace().search(q, 2, 3).is_err() || e.trace().get_recent(5).len() != 5 {
                        bad.fetch_add(1, Ordering::Relaxed);
                    }
                    done.fetch_add(1, Ordering::Relaxed);
                    i += 1;
                }
            });
        }
        for _ in 0..3 {
            e.compact().unwrap();
        }
        stop.store(true, Ordering::Relaxed);
    });
    assert_eq!(bad.load(Ordering::Relaxed), 0);
    assert!(done.load(Ordering::Relaxed) > 0);
    assert_eq!(e.generation(), 4);
}

#[test]
fn old_generation_files_are_deleted() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), 8, Quantization::Fp32, true);
    let mut r = rng(6);
    for _ in 0..3 {
        let v = random_unit(&mut r, 8);
        e.atlas().insert(&v).unwrap();
        e.trace().append_event(EventKind::User, b"x", &v, &[]).unwrap();
        e.compact().unwrap();
    }
    e.epochs().try_advance();
    e.epochs().try_advance();
    e.epochs().try_reclaim();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|d| d.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["MANIFEST", "aeon.wal", "atlas_gen4.bin", "trace_blobs_gen4.bin", "trace_embed_gen4.bin", "trace_gen4.bin"]
    );
    let st = e.epochs().stats();
    assert_eq!(st.retired, st.reclaimed);
}
