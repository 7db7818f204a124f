//! Reader/writer stress on epoch-based reclamation.
//!
//! Readers repeatedly pin, follow two published pointers and validate what
//! they find:
//!
//! * a generation file whose first data page holds a fixed pattern. The
//!   writer grows it (remapping and retiring the old mapping) and, once it
//!   reaches its size cap, replaces it with a fresh file and retires the
//!   whole handle;
//! * a small stamped payload that the writer swaps and retires on every
//!   round. Dropping a payload overwrites it with a poison value first.
//!
//! A pattern mismatch or a stamp disagreement is a torn read; a poisoned
//! stamp is a use after reclamation. Touching an unmapped page would crash
//! the process outright.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use aeon_core::storage::{EpochManager, GenerationFile, HEADER_BYTES};
use anyhow::Result;

use super::scratch_dir;
use crate::report::Record;

const POISON: u64 = 0xDEAD_BEEF_DEAD_BEEF;
const PATTERN_BYTES: usize = 4096;
const INITIAL_FILE_BYTES: u64 = 2 * HEADER_BYTES;
const MAX_FILE_BYTES: u64 = 1 << 20;
/// One reader iteration in this many is timed.
const TIMING_STRIDE: usize = 16;
const YIELD_STRIDE: usize = 256;

#[derive(Debug, Clone, Copy)]
pub struct EbrParams {
    pub readers: usize,
    pub iterations: usize,
}

impl Default for EbrParams {
    fn default() -> Self {
        EbrParams { readers: 15, iterations: 100_000 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EbrOutcome {
    pub readers: usize,
    pub iterations: usize,
    pub torn_reads: u64,
    pub use_after_reclaim: u64,
    pub payload_swaps: u64,
    pub remaps: u64,
    pub file_replacements: u64,
    pub retired: u64,
    pub reclaimed: u64,
    pub pending: u64,
    pub payloads_dropped: u64,
    /// Sampled reader iteration times.
    pub read_ns: Vec<f64>,
}

impl EbrOutcome {
    pub fn passed(&self) -> bool {
        self.torn_reads == 0
            && self.use_after_reclaim == 0
            && self.retired == self.reclaimed
            && self.pending == 0
            && self.payloads_dropped == self.payload_swaps
    }
}

struct Stamped {
    words: [AtomicU64; 8],
    dropped: Arc<AtomicU64>,
}

impl Drop for Stamped {
    fn drop(&mut self) {
        for w in &self.words {
            w.store(POISON, Ordering::SeqCst);
        }
        self.dropped.fetch_add(1, Ordering::SeqCst);
    }
}

fn stamped(stamp: u64, dropped: &Arc<AtomicU64>) -> *mut Stamped {
    Box::into_raw(Box::new(Stamped {
        words: std::array::from_fn(|_| AtomicU64::new(stamp)),
        dropped: dropped.clone(),
    }))
}

/// Owns a raw pointer handed to the epoch manager.
struct Retired<T>(*mut T);
// SAFETY: ownership moves with the wrapper; the pointee is Send.
unsafe impl<T: Send> Send for Retired<T> {}
impl<T> Drop for Retired<T> {
    fn drop(&mut self) {
        // SAFETY: produced by Box::into_raw and dropped exactly once.
        drop(unsafe { Box::from_raw(self.0) });
    }
}

fn pattern() -> Vec<u8> {
    (0..PATTERN_BYTES).map(|i| (i * 131 % 251) as u8).collect()
}

fn new_file(dir: &Path, n: u64, epochs: &Arc<EpochManager>, pattern: &[u8]) -> Result<*mut GenerationFile> {
    let f = GenerationFile::create(dir.join(format!("stress_{n}.bin")), n as u32, INITIAL_FILE_BYTES, epochs.clone())?;
    f.write_at(HEADER_BYTES, pattern)?;
    f.remove_on_drop();
    Ok(Box::into_raw(Box::new(f)))
}

pub fn run(base: &Path, p: EbrParams) -> Result<EbrOutcome> {
    let dir = scratch_dir(base, "ebr")?;
    let epochs = Arc::new(EpochManager::new());
    let pattern = pattern();
    let dropped = Arc::new(AtomicU64::new(0));
    let file = AtomicPtr::new(new_file(&dir, 0, &epochs, &pattern)?);
    let payload = AtomicPtr::new(stamped(0, &dropped));
    let stop = AtomicBool::new(false);
    let torn = AtomicU64::new(0);
    let poisoned = AtomicU64::new(0);

    let mut out = EbrOutcome { readers: p.readers, iterations: p.iterations, ..Default::default() };
    let writer_result = std::thread::scope(|s| -> Result<()> {
        let writer = s.spawn(|| -> Result<(u64, u64, u64)> {
            let (mut swaps, mut remaps, mut replacements) = (0u64, 0u64, 0u64);
            while !stop.load(Ordering::Relaxed) {
                swaps += 1;
                let old = payload.swap(stamped(swaps, &dropped), Ordering::SeqCst);
                epochs.retire(Retired(old));
                if swaps % 8 == 0 {
                    // SAFETY: only this thread replaces the file pointer.
                    let f = unsafe { &*file.load(Ordering::SeqCst) };
                    if f.capacity() < MAX_FILE_BYTES {
                        f.grow(f.capacity() * 2)?;
                        remaps += 1;
                    } else {
                        replacements += 1;
                        let old = file.swap(new_file(&dir, replacements, &epochs, &pattern)?, Ordering::SeqCst);
                        epochs.retire(Retired(old));
                    }
                }
                epochs.try_reclaim();
                std::thread::yield_now();
            }
            Ok((swaps, remaps, replacements))
        });


        let readers: Vec<_> = (0..p.readers)
            .map(|_| {
                s.spawn(|| {
                    let mut samples = Vec::with_capacity(p.iterations / TIMING_STRIDE + 1);
                    for i in 0..p.iterations {
                        let t = Instant::now();
                        let g = epochs.pin();
                        // SAFETY: both pointers are loaded after pinning and
                        // are only retired after being unlinked.
                        let f = unsafe { &*file.load(Ordering::SeqCst) };
                        if f.slice(&g, HEADER_BYTES, PATTERN_BYTES) != pattern.as_slice() {
                            torn.fetch_add(1, Ordering::Relaxed);
                        }
                        let w = unsafe { &(*payload.load(Ordering::SeqCst)).words };
                        let first = w[0].load(Ordering::SeqCst);
                        if first == POISON {
                            poisoned.fetch_add(1, Ordering::Relaxed);
                        } else if w.iter().any(|x| x.load(Ordering::SeqCst) != first) {
                            torn.fetch_add(1, Ordering::Relaxed);
                        }
                        drop(g);
                        if i % TIMING_STRIDE == 0 {
                            samples.push(t.elapsed().as_nanos() as f64);
                        }
                        // Keeps the writer interleaved even on a single core.
                        if i % YIELD_STRIDE == YIELD_STRIDE - 1 {
                            std::thread::yield_now();
                        }
                    }
                    samples
                })
            })
            .collect();

        for r in readers {
            out.read_ns.extend(r.join().expect("reader panicked"));
        }
        stop.store(true, Ordering::Relaxed);
        let (swaps, remaps, replacements) = writer.join().expect("writer panicked")?;
        out.payload_swaps = swaps;
        out.remaps = remaps;
        out.file_replacements = replacements;
        Ok(())
    });
    writer_result?;

    epochs.reclaim_all();
    let st = epochs.stats();
    out.torn_reads = torn.load(Ordering::Relaxed);
    out.use_after_reclaim = poisoned.load(Ordering::Relaxed);
    out.retired = st.retired;
    out.reclaimed = st.reclaimed;
    out.pending = st.pending;
    out.payloads_dropped = dropped.load(Ordering::SeqCst);
    drop(Retired(payload.into_inner()));
    drop(Retired(file.into_inner()));
    std::fs::remove_dir_all(&dir).ok();
    Ok(out)
}

impl EbrOutcome {
    pub fn record(repeats: &[EbrOutcome]) -> Record {
        let samples: Vec<Vec<f64>> = repeats.iter().map(|o| o.read_ns.clone()).collect();
        let sum = |f: fn(&EbrOutcome) -> u64| repeats.iter().map(f).sum::<u64>();
        let first = repeats.first().cloned().unwrap_or_default();
        Record::from_repeats("ebr.reader_iteration", "ns", &samples)
            .param("readers", first.readers)
            .param("iterations", first.iterations)
            .counter("torn_reads", sum(|o| o.torn_reads))
            .counter("use_after_reclaim", sum(|o| o.use_after_reclaim))
            .timing("payload_swaps", sum(|o| o.payload_swaps))
            .timing("remaps", sum(|o| o.remaps))
            .timing("file_replacements", sum(|o| o.file_replacements))
            .timing("retired", sum(|o| o.retired))
            .timing("reclaimed", sum(|o| o.reclaimed))
            .counter("pending", sum(|o| o.pending))
    }
}
