use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering};
use std::sync::Arc;

use aeon_core::storage::{EpochManager, GenerationFile};

const POISON: u64 = 0xDEAD_DEAD_DEAD_DEAD;

/// A payload whose words all equal its stamp. Dropping it scribbles over
/// them first, so a reader touching reclaimed memory sees the poison.
struct Stamped {
    words: [AtomicU64; 8],
    dropped: Arc<AtomicU64>,
}

impl Stamped {
    fn new(stamp: u64, dropped: Arc<AtomicU64>) -> Box<Self> {
        Box::new(Stamped {
            words: std::array::from_fn(|_| AtomicU64::new(stamp)),
            dropped,
        })
    }
}

impl Drop for Stamped {
    fn drop(&mut self) {
        for w in &self.words {
            w.store(POISON, Ordering::SeqCst);
        }
        self.dropped.fetch_add(1, Ordering::SeqCst);
    }
}

struct Owned(*mut Stamped);
// SAFETY: the pointer is uniquely owned once retired.
unsafe impl Send for Owned {}
impl Drop for Owned {
    fn drop(&mut self) {
        // SAFETY: produced by Box::into_raw and retired exactly once.
        drop(unsafe { Box::from_raw(self.0) });
    }
}

#[test]
fn readers_never_observe_reclaimed_payloads() {
    const READERS: usize = 15;
    const ITERS: usize = 20_000;
    let epochs = EpochManager::new();
    let dropped = Arc::new(AtomicU64::new(0));
    let current = AtomicPtr::new(Box::into_raw(Stamped::new(1, dropped.clone())));
    let stop = AtomicBool::new(false);
    let torn = AtomicU64::new(0);
    let swaps = AtomicU64::new(0);

    std::thread::scope(|s| {
        let mut readers = Vec::new();
        for _ in 0..READERS {
            readers.push(s.spawn(|| {
                for _ in 0..ITERS {
                    let _g = epochs.pin();
                    // SAFETY: pinned before loading; the writer retires only
                    // after unlinking.
                    let p = unsafe { &*current.load(Ordering::SeqCst) };
                    let first = p.words[0].load(Ordering::SeqCst);
                    if first == POISON || p.words.iter().any(|w| w.load(Ordering::SeqCst) != first) {
                        torn.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }));
        }
        s.spawn(|| {
            let mut stamp = 1;
            while !stop.load(Ordering::Relaxed) {
                stamp += 1;
                let old = current.swap(Box::into_raw(Stamped::new(stamp, dropped.clone())), Ordering::SeqCst);
                epochs.retire(Owned(old));
                epochs.try_reclaim();
                swaps.fetch_add(1, Ordering::Relaxed);
                std::thread::yield_now();
            }
        });
        for r in readers {
            r.join().unwrap();
        }
        stop.store(true, Ordering::Relaxed);
    });

    assert_eq!(torn.load(Ordering::Relaxed), 0);
    assert!(swaps.load(Ordering::Relaxed) > 0);
    epochs.reclaim_all();
    let st = epochs.stats();
    assert_eq!(st.pending, 0);
    assert_eq!(st.retired, st.reclaimed);
    assert_eq!(st.retired, swaps.load(Ordering::Relaxed));
    assert_eq!(dropped.load(Ordering::SeqCst), st.reclaimed);
    drop(Owned(current.into_inner()));
}

#[test]
fn a_pinned_guard_holds_back_reclamation() {
    let epochs = EpochManager::new();
    let dropped = Arc::new(AtomicU64::new(0));
    let g = epochs.pin();
    epochs.retire(Owned(Box::into_raw(Stamped::new(7, dropped.clone()))));
    for _ in 0..10 {
        epochs.try_reclaim();
    }
    assert_eq!(dropped.load(Ordering::SeqCst), 0);
    assert_eq!(epochs.stats().pending, 1);
    drop(g);
    epochs.reclaim_all();
    assert_eq!(dropped.load(Ordering::SeqCst), 1);
    assert_eq!(epochs.stats().pending, 0);
}

#[test]
fn remapping_a_file_under_readers_keeps_contents_stable() {
    let dir = tempfile::tempdir().unwrap();
    let epochs = Arc::new(EpochManager::new());
    let file = GenerationFile::create(dir.path().join("g.bin"), 1, 8192, epochs.clone()).unwrap();
    let pattern: Vec<u8> = (0..4096u32).map(|i| (i * 31 % 251) as u8).collect();
    file.write_at(4096, &pattern).unwrap();
    let stop = AtomicBool::new(false);
    let bad = AtomicU64::new(0);
    let reads = AtomicU64::new(0);

    std::thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| {
                while !stop.load(Ordering::Relaxed) {
                    let g = epochs.pin();
                    if file.slice(&g, 4096, 4096) != pattern.as_slice() {
                        bad.fetch_add(1, Ordering::Relaxed);
                    }
                    reads.fetch_add(1, Ordering::Relaxed);
                }
            });
        }
        let mut cap = file.capacity();
        for _ in 0..10 {
            cap = file.grow(cap + 1).unwrap();
            epochs.try_reclaim();
            std::thread::yield_now();
        }
        stop.store(true, Ordering::Relaxed);
    });

    assert_eq!(bad.load(Ordering::Relaxed), 0);
    assert!(reads.load(Ordering::Relaxed) > 0);
    assert_eq!(file.capacity(), 8192 << 10);
    epochs.reclaim_all();
    let st = epochs.stats();
    assert_eq!((st.retired, st.reclaimed, st.pending), (10, 10, 0));
    let g = epochs.pin();
    assert_eq!(file.slice(&g, 4096, 4096), pattern.as_slice());
}
