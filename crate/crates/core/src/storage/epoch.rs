//! Epoch-based reclamation for mapped regions and retired generations.
//!
//! A reader pins the current global epoch into one of a fixed set of slots,
//! each on its own cache line. Writers unlink a region first and then
//! [`retire`](EpochManager::retire) it, stamping it with the global epoch.
//! The global epoch only advances when every pinned slot has observed the
//! current value, so a region retired at epoch `e` is dropped once the
//! global epoch reaches `e + 2`: by then no guard that could have seen it is
//! still live.

use std::any::Any;
use std::sync::atomic::{fence, AtomicU64, Ordering};

use parking_lot::Mutex;

/// Number of concurrently pinned guards supported. Pinning spins when all
/// slots are taken.
pub const DEFAULT_SLOTS: usize = 256;

const INACTIVE: u64 = 0;

#[inline]
fn active(epoch: u64) -> u64 {
    (epoch << 1) | 1
}

#[inline]
fn epoch_of(state: u64) -> u64 {
    state >> 1
}

/// One reader's epoch announcement, padded to a full cache line.
#[repr(align(64))]
pub struct EpochSlot {
    state: AtomicU64,
}

#[repr(align(64))]
struct GlobalEpoch(AtomicU64);

struct RetiredRegion {
    epoch: u64,
    #[allow(dead_code)] // only ever dropped
    payload: Box<dyn Any + Send>,
}

/// Counters describing retirement progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochStats {
    pub global_epoch: u64,
    pub retired: u64,
    pub reclaimed: u64,
    pub pending: u64,
}

pub struct EpochManager {
    global: GlobalEpoch,
    slots: Box<[EpochSlot]>,
    retired: Mutex<Vec<RetiredRegion>>,
    retired_count: AtomicU64,
    reclaimed_count: AtomicU64,
}

/// A pinned reader. Memory observed after pinning stays valid until drop.
#[must_use]
pub struct EpochGuard<'a> {
    manager: &'a EpochManager,
    slot: usize,
    epoch: u64,
}

impl Default for EpochManager {
    fn default() -> Self {
        Self::new()
    }
}

impl EpochManager {
    pub fn new() -> Self {
        Self::with_slots(DEFAULT_SLOTS)
    }

    pub fn with_slots(n: usize) -> Self {
        assert!(n > 0);
        EpochManager {
            global: GlobalEpoch(AtomicU64::new(1)),
            slots: (0..n).map(|_| EpochSlot { state: AtomicU64::new(INACTIVE) }).collect(),
            retired: Mutex::new(Vec::new()),
            retired_count: AtomicU64::new(0),
            reclaimed_count: AtomicU64::new(0),
        }
    }

    pub fn global_epoch(&self) -> u64 {
        self.global.0.load(Ordering::SeqCst)
    }

    pub fn pin(&self) -> EpochGuard<'_> {
        let n = self.slots.len();
        let start = thread_hint() % n;
        let mut spins = 0u32;
        loop {
            for k in 0..n {
                let i = (start + k) % n;
                let slot = &self.slots[i].state;
                if slot.load(Ordering::Relaxed) != INACTIVE {
                    continue;
                }
                let epoch = self.global.0.load(Ordering::SeqCst);
                if slot
                    .compare_exchange(INACTIVE, active(epoch), Ordering::SeqCst, Ordering::Relaxed)
                    .is_ok()
                {
                    fence(Ordering::SeqCst);
                    return EpochGuard {
                        manager: self,
                        slot: i,
                        epoch,
                    };
                }
            }
            spins += 1;
            if spins.is_multiple_of(16) {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }

    /// Queues `payload` for dropping once no guard can still observe it.
    /// The caller must already have made it unreachable for new readers.
    pub fn retire<T: Any + Send>(&self, payload: T) {
        self.retire_boxed(Box::new(payload));
    }

    pub fn retire_boxed(&self, payload: Box<dyn Any + Send>) {
        let epoch = self.global.0.load(Ordering::SeqCst);
        self.retired.lock().push(RetiredRegion { epoch, payload });
        self.retired_count.fetch_add(1, Ordering::Relaxed);
    }

    /// Advances the global epoch if every pinned slot has caught up with it.
    pub fn try_advance(&self) -> bool {
        let current = self.global.0.load(Ordering::SeqCst);
        for slot in self.slots.iter() {
            let state = slot.state.load(Ordering::SeqCst);
            if state != INACTIVE && epoch_of(state) != current {
                return false;
            }
        }
        self.global
            .0
            .compare_exchange(current, current + 1, Ordering::SeqCst, Ordering::Relaxed)
            .is_ok()
    }

    /// Tries to advance once, then drops every region at least two epochs
    /// stale. Returns how many were dropped.
    pub fn try_reclaim(&self) -> usize {
        self.try_advance();
        let now = self.global.0.load(Ordering::SeqCst);
        let ready: Vec<RetiredRegion> = {
            let mut retired = self.retired.lock();
            let (ready, keep) = retired.drain(..).partition(|r| r.epoch + 2 <= now);
            *retired = keep;
            ready
        };
        let n = ready.len();
        drop(ready);
        self.reclaimed_count.fetch_add(n as u64, Ordering::Relaxed);
        n
    }

    /// Keeps advancing and reclaiming until nothing is pending or a pinned
    /// guard blocks progress.
    pub fn reclaim_all(&self) -> usize {
        let mut total = 0;
        for _ in 0..4 {
            total += self.try_reclaim();
            if self.retired.lock().is_empty() {
                break;
            }
        }
        total
    }

    pub fn stats(&self) -> EpochStats {
        EpochStats {
            global_epoch: self.global_epoch(),
            retired: self.retired_count.load(Ordering::Relaxed),
            reclaimed: self.reclaimed_count.load(Ordering::Relaxed),
            pending: self.retired.lock().len() as u64,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Addresses of the slot counters, for layout checks.
    pub fn slot_addresses(&self) -> Vec<usize> {
        self.slots.iter().map(|s| &s.state as *const AtomicU64 as usize).collect()
    }
}

impl Drop for EpochManager {
    fn drop(&mut self) {
        // No guard can outlive the manager, so everything pending is unreachable.
        let pending = std::mem::take(self.retired.get_mut());
        self.reclaimed_count.fetch_add(pending.len() as u64, Ordering::Relaxed);
    }
}

impl EpochGuard<'_> {
    /// The global epoch observed when this guard was pinned.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Drop for EpochGuard<'_> {
    fn drop(&mut self) {
        self.manager.slots[self.slot].state.store(INACTIVE, Ordering::SeqCst);
    }
}

fn thread_hint() -> usize {
    use std::hash::{Hash, Hasher};
    thread_local! {
        static HINT: usize = {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            std::thread::current().id().hash(&mut h);
            h.finish() as usize
        };
    }
    HINT.with(|h| *h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    struct Counted(Arc<AtomicUsize>);

    impl Drop for Counted {
        fn drop(&mut self) {
            self.0.fetch_add(1, Ordering::SeqCst);
        }
    }

    #[test]
    fn live_guard_from_retire_epoch_blocks_reclaim() {
        let ebr = EpochManager::new();
        let dropped = Arc::new(AtomicUsize::new(0));
        let guard = ebr.pin();
        ebr.retire(Counted(dropped.clone()));
        assert_eq!(ebr.try_reclaim(), 0);
        assert_eq!(ebr.try_reclaim(), 0);
        assert_eq!(dropped.load(Ordering::SeqCst), 0);
        drop(guard);
        assert_eq!(ebr.reclaim_all(), 1);
        assert_eq!(dropped.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn reclaims_after_two_advances() {
        let ebr = EpochManager::new();
        let dropped = Arc::new(AtomicUsize::new(0));
        ebr.retire(Counted(dropped.clone()));
        assert!(ebr.try_advance());
        assert!(ebr.try_advance());
        assert_eq!(ebr.try_reclaim(), 1);
        assert_eq!(dropped.load(Ordering::SeqCst), 1);
        let s = ebr.stats();
        assert_eq!((s.retired, s.reclaimed, s.pending), (1, 1, 0));
    }

    #[test]
    fn stale_guard_stops_the_epoch() {
        let ebr = EpochManager::new();
        let g = ebr.pin();
        assert!(ebr.try_advance());
        assert!(!ebr.try_advance());
        drop(g);
        assert!(ebr.try_advance());
    }

    #[test]
    fn slots_do_not_share_cache_lines() {
        let ebr = EpochManager::with_slots(16);
        assert!(std::mem::align_of::<EpochSlot>() >= 64);
        assert!(std::mem::size_of::<EpochSlot>() >= 64);
        let addrs = ebr.slot_addresses();
        for w in addrs.windows(2) {
            assert!(w[1] - w[0] >= 64);
            assert_ne!(w[0] / 64, w[1] / 64);
        }
    }

    #[test]
    fn many_guards_fill_distinct_slots() {
        let ebr = EpochManager::with_slots(8);
        let guards: Vec<_> = (0..8).map(|_| ebr.pin()).collect();
        let mut slots: Vec<usize> = guards.iter().map(|g| g.slot).collect();
        slots.sort_unstable();
        slots.dedup();
        assert_eq!(slots.len(), 8);
    }
}
