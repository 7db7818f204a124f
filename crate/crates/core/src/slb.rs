//! Semantic lookaside buffer: a sharded FP32 cache in front of the atlas.
//!
//! Sessions are routed to one of 64 shards by FNV-1a. Each shard holds up
//! to 64 entries behind its own lock and is scanned exhaustively; a lookup
//! hits when the best similarity is strictly above the threshold. When a
//! shard is full, the entry with the smallest recency tick is replaced.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::kernels::{self, QuantizedVector};

pub const SLB_SHARDS: usize = 64;
pub const SLB_SHARD_CAPACITY: usize = 64;
pub const DEFAULT_HIT_THRESHOLD: f32 = 0.90;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Shard index for a session.
pub fn route(session_id: &str) -> Result<usize> {
    if session_id.is_empty() {
        return Err(Error::invalid("session id must not be empty"));
    }
    Ok((fnv1a64(session_id.as_bytes()) % SLB_SHARDS as u64) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlbConfig {
    pub dim: usize,
    pub hit_threshold: f32,
}

impl SlbConfig {
    pub fn new(dim: usize) -> SlbConfig {
        SlbConfig {
            dim,
            hit_threshold: DEFAULT_HIT_THRESHOLD,
        }
    }

    pub fn with_hit_threshold(mut self, tau: f32) -> SlbConfig {
        self.hit_threshold = tau;
        self
    }
}

/// Vector handed to [`Slb::insert`]. INT8 input is dequantized.
#[derive(Debug, Clone, Copy)]
pub enum SlbVector<'a> {
    Fp32(&'a [f32]),
    Int8(&'a QuantizedVector),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lookup {
    Hit { node_id: u64, similarity: f32, comparisons: u32 },
    Miss { best: Option<f32>, comparisons: u32 },
}

impl Lookup {
    pub fn node_id(&self) -> Option<u64> {
        match *self {
            Lookup::Hit { node_id, .. } => Some(node_id),
            Lookup::Miss { .. } => None,
        }
    }

    pub fn comparisons(&self) -> u32 {
        match *self {
            Lookup::Hit { comparisons, .. } | Lookup::Miss { comparisons, .. } => comparisons,
        }
    }

    pub fn is_hit(&self) -> bool {
        matches!(self, Lookup::Hit { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlbEntry {
    pub centroid: Vec<f32>,
    pub node_id: u64,
    pub last_hit_tick: u64,
}

#[derive(Debug, Default)]
struct Shard {
    entries: Vec<SlbEntry>,
    tick: u64,
}

impl Shard {
    fn scan(&self, q: &[f32]) -> Option<(usize, f32)> {
        let mut best: Option<(usize, f32)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let s = kernels::dot_f32(q, &e.centroid);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlbStats {
    pub hits: u64,
    pub misses: u64,
    pub comparisons: u64,
    pub evictions: u64,
    pub stale_dropped: u64,
}

impl SlbStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }

    /// `hits / lookups`, or 0 before the first lookup.
    pub fn hit_rate(&self) -> f64 {
        match self.lookups() {
            0 => 0.0,
            n => self.hits as f64 / n as f64,
        }
    }
}

pub struct Slb {
    config: SlbConfig,
    shards: Vec<Mutex<Shard>>,
    hits: AtomicU64,
    misses: AtomicU64,
    comparisons: AtomicU64,
    evictions: AtomicU64,
    stale_dropped: AtomicU64,
}

impl Slb {
    pub fn new(config: SlbConfig) -> Result<Slb> {
        if !(-1.0..=1.0).contains(&config.hit_threshold) {
            return Err(Error::invalid(format!("hit threshold {} outside [-1, 1]", config.hit_threshold)));
        }
        if config.dim == 0 {
            return Err(Error::invalid("cache dimension must be positive"));
        }
        Ok(Slb {
            config,
            shards: (0..SLB_SHARDS).map(|_| Mutex::new(Shard::default())).collect(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            comparisons: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            stale_dropped: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &SlbConfig {
        &self.config
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.config.dim {
            return Err(Error::invalid(format!(
                "vector has {len} components, cache dimension is {}",
                self.config.dim
            )));
        }
        Ok(())
    }

    pub fn lookup(&self, session_id: &str, q: &[f32]) -> Result<Lookup> {
        self.lookup_validated(session_id, q, |_| true)
    }

    /// Like [`Slb::lookup`], but a hit on a node for which `is_live` returns
    /// false drops that entry and the scan is repeated.
    pub fn lookup_validated(&self, session_id: &str, q: &[f32], is_live: impl Fn(u64) -> bool) -> Result<Lookup> {
        self.check_dim(q.len())?;
        let mut shard = self.shards[route(session_id)?].lock();
        let mut comparisons = 0u32;
        let outcome = loop {
            let best = shard.scan(q);
            comparisons += shard.entries.len() as u32;
            match best {
                Some((i, s)) if s > self.config.hit_threshold => {
                    let node_id = shard.entries[i].node_id;
                    if !is_live(node_id) {
                        shard.entries.swap_remove(i);
                        self.stale_dropped.fetch_add(1, Ordering::Relaxed);
                        continue;
                    }
                    shard.tick += 1;
                    shard.entries[i].last_hit_tick = shard.tick;
                    break Lookup::Hit {
                        node_id,
                        similarity: s,
                        comparisons,
                    };
                }
                best => {
                    break Lookup::Miss {
                        best: best.map(|(_, s)| s),
                        comparisons,
                    }
                }
            }
        };
        drop(shard);
        self.comparisons.fetch_add(u64::from(comparisons), Ordering::Relaxed);
        match outcome {
            Lookup::Hit { .. } => self.hits.fetch_add(1, Ordering::Relaxed),
            Lookup::Miss { .. } => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        Ok(outcome)
    }

    pub fn insert(&self, session_id: &str, vector: SlbVector<'_>, node_id: u64) -> Result<()> {
        let centroid = match vector {
            SlbVector::Fp32(v) => v.to_vec(),
            SlbVector::Int8(q) => kernels::dequantize(q),
        };
        self.check_dim(centroid.len())?;
        let mut shard = self.shards[route(session_id)?].lock();
        shard.tick += 1;
        let tick = shard.tick;
        let entry = SlbEntry {
            centroid,
            node_id,
            last_hit_tick: tick,
        };
        if let Some(e) = shard.entries.iter_mut().find(|e| e.node_id == node_id) {
            *e = entry;
        } else if shard.entries.len() < SLB_SHARD_CAPACITY {
            shard.entries.push(entry);
        } else {
            let victim = (0..shard.entries.len())
                .min_by_key(|&i| shard.entries[i].last_hit_tick)
                .expect("full shard has entries");
            shard.entries[victim] = entry;
            self.evictions.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn occupancy(&self, shard: usize) -> usize {
        self.shards[shard].lock().entries.len()
    }

    /// Copies of the entries of one shard.
    pub fn shard_entries(&self, shard: usize) -> Vec<SlbEntry> {
        self.shards[shard].lock().entries.clone()
    }

    pub fn stats(&self) -> SlbStats {
        SlbStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            comparisons: self.comparisons.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            stale_dropped: self.stale_dropped.load(Ordering::Relaxed),
        }
    }

    pub fn reset_stats(&self) {
        for c in [&self.hits, &self.misses, &self.comparisons, &self.evictions, &self.stale_dropped] {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn clear(&self) {
        for s in &self.shards {
            *s.lock() = Shard::default();
        }
    }
}
