//! Locks that record which of the two write-path lock classes a thread holds.
//!
//! The log lock guards the WAL file and the delta lock guards the in-memory
//! delta buffer. No thread may hold both at once; every acquisition checks
//! the calling thread's held set and counts a violation if the other class
//! is already held. Tests read the counters through [`lock_audit`].

use std::cell::Cell;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockClass {
    Log = 0,
    Delta = 1,
}

impl LockClass {
    fn other(self) -> LockClass {
        match self {
            LockClass::Log => LockClass::Delta,
            LockClass::Delta => LockClass::Log,
        }
    }
}

thread_local! {
    static HELD: Cell<[u32; 2]> = const { Cell::new([0, 0]) };
}

static ACQUISITIONS: [AtomicU64; 2] = [AtomicU64::new(0), AtomicU64::new(0)];
static CO_HELD: AtomicU64 = AtomicU64::new(0);

/// Process-wide lock acquisition counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockAudit {
    pub log_acquisitions: u64,
    pub delta_acquisitions: u64,
    /// Acquisitions that happened while the other class was held by the same thread.
    pub co_held: u64,
}

pub fn lock_audit() -> LockAudit {
    LockAudit {
        log_acquisitions: ACQUISITIONS[LockClass::Log as usize].load(Ordering::Relaxed),
        delta_acquisitions: ACQUISITIONS[LockClass::Delta as usize].load(Ordering::Relaxed),
        co_held: CO_HELD.load(Ordering::Relaxed),
    }
}

/// Number of locks of `class` the calling thread currently holds.
pub fn held_by_current_thread(class: LockClass) -> u32 {
    HELD.with(|h| h.get()[class as usize])
}

fn enter(class: LockClass) {
    ACQUISITIONS[class as usize].fetch_add(1, Ordering::Relaxed);
    HELD.with(|h| {
        let mut held = h.get();
        if held[class.other() as usize] > 0 {
            CO_HELD.fetch_add(1, Ordering::Relaxed);
            log::error!("{class:?} lock acquired while holding the {:?} lock", class.other());
        }
        held[class as usize] += 1;
        h.set(held);
    });
}

fn exit(class: LockClass) {
    HELD.with(|h| {
        let mut held = h.get();
        held[class as usize] -= 1;
        h.set(held);
    });
}

struct Token(LockClass);

impl Token {
    fn new(class: LockClass) -> Token {
        enter(class);
        Token(class)
    }
}

impl Drop for Token {
    fn drop(&mut self) {
        exit(self.0);
    }
}

pub struct AuditedMutex<T> {
    class: LockClass,
    inner: Mutex<T>,
}

pub struct AuditedMutexGuard<'a, T> {
    guard: MutexGuard<'a, T>,
    _token: Token,
}

impl<T> AuditedMutex<T> {
    pub fn new(class: LockClass, value: T) -> Self {
        AuditedMutex {
            class,
            inner: Mutex::new(value),
        }
    }

    pub fn lock(&self) -> AuditedMutexGuard<'_, T> {
        let guard = self.inner.lock();
        AuditedMutexGuard {
            guard,
            _token: Token::new(self.class),
        }
    }
}

impl<T> Deref for AuditedMutexGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.guard
    }
}

impl<T> DerefMut for AuditedMutexGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        &mut self.guard
    }
}

pub struct AuditedRwLock<T> {
    class: LockClass,
    inner: RwLock<T>,
}

pub struct AuditedReadGuard<'a, T> {
    guard: RwLockReadGuard<'a, T>,
    _token: Token,
}

pub struct AuditedWriteGuard<'a, T> {
    guard: RwLockWriteGuard<'a, T>,
    _token: Token,
}

impl<T> AuditedRwLock<T> {
    pub fn new(class: LockClass, value: T) -> Self {
        AuditedRwLock {
            class,
            inner: RwLock::new(value),
        }
    }

    pub fn read(&self) -> AuditedReadGuard<'_, T> {
        let guard = self.inner.read();
        AuditedReadGuard {
            guard,
            _token: Token::new(self.class),
        }
    }

    pub fn write(&self) -> AuditedWriteGuard<'_, T> {
        let guard = self.inner.write();
        AuditedWriteGuard {
            guard,
            _token: Token::new(self.class),
        }
    }
}

impl<T> Deref for AuditedReadGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.guard
    }
}

impl<T> Deref for AuditedWriteGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.guard
    }
}

impl<T> DerefMut for AuditedWriteGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        &mut self.guard
    }
}
