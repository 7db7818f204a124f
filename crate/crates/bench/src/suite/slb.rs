//! Lookaside buffer: scan cost per occupancy, Conversational Walk hit rate,
//! the effective-cost identity, and shard isolation.

use std::path::Path;
use std::time::Instant;

use aeon_core::atlas::Quantization;
use aeon_core::slb::{route, Slb, SlbConfig, SlbVector, SLB_SHARDS};
use aeon_core::Engine;
use anyhow::Result;
use rand::Rng;

use super::fresh_engine;
use crate::dataset::{random_unit, rng, DenseForestSpec};
use crate::report::{Record, REPEATS};
use crate::walk::{ConversationalWalk, Drift};

#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub occupancy: usize,
    pub mean_comparisons: f64,
}

/// Fills one shard to each occupancy and scans it with random queries.
pub fn occupancy_sweep(dim: usize, occupancies: &[usize], lookups: usize, seed: u64) -> Result<(Vec<SweepPoint>, Vec<Record>)> {
    let slb = Slb::new(SlbConfig::new(dim))?;
    let mut r = rng(seed);
    let mut filled = 0usize;
    let mut points = Vec::new();
    let mut records = Vec::new();
    for &occ in occupancies {
        while filled < occ {
            slb.insert("sweep", SlbVector::Fp32(&random_unit(&mut r, dim)), filled as u64 + 1)?;
            filled += 1;
        }
        let queries: Vec<Vec<f32>> = (0..64).map(|_| random_unit(&mut r, dim)).collect();
        let mut total = 0u64;
        let mut reps = Vec::new();
        for _ in 0..REPEATS {
            let mut samples = Vec::with_capacity(lookups);
            for i in 0..lookups {
                let t = Instant::now();
                let l = slb.lookup("sweep", &queries[i % queries.len()])?;
                samples.push(t.elapsed().as_nanos() as f64);
                total += u64::from(l.comparisons());
            }
            reps.push(samples);
        }
        let mean = total as f64 / (lookups * REPEATS) as f64;
        points.push(SweepPoint { occupancy: occ, mean_comparisons: mean });
        records.push(
            Record::from_repeats("slb.lookup", "ns", &reps)
                .param("dim", dim)
                .param("occupancy", occ)
                .counter("mean_comparisons", mean),
        );
    }
    Ok((points, records))
}

#[derive(Debug, Clone)]
pub struct WalkOutcome {
    pub drift: Drift,
    pub dim: usize,
    pub queries: usize,
    pub hits: u64,
    pub misses: u64,
    /// Mean nanoseconds per hit and per miss, timed call by call.
    pub hit_ns: f64,
    pub miss_ns: f64,
    /// Wall time of the whole walk divided by the query count.
    pub measured_ns: f64,
    pub hit_comparisons: f64,
    pub miss_comparisons: f64,
    pub measured_comparisons: f64,
}

impl WalkOutcome {
    pub fn hit_rate(&self) -> f64 {
        self.hits as f64 / (self.hits + self.misses).max(1) as f64
    }

    pub fn predicted_ns(&self) -> f64 {
        let h = self.hit_rate();
        h * self.hit_ns + (1.0 - h) * self.miss_ns
    }

    /// `|predicted - measured| / measured` for wall time.
    pub fn identity_error(&self) -> f64 {
        (self.predicted_ns() - self.measured_ns).abs() / self.measured_ns
    }

    pub fn predicted_comparisons(&self) -> f64 {
        let h = self.hit_rate();
        h * self.hit_comparisons + (1.0 - h) * self.miss_comparisons
    }

    pub fn record(&self) -> Record {
        Record::counters_only("slb.conversational_walk")
            .param("drift", self.drift.name())
            .param("dim", self.dim)
            .param("queries", self.queries)
            .counter("hits", self.hits)
            .counter("misses", self.misses)
            .counter("hit_rate", self.hit_rate())
            .timing("hit_ns", self.hit_ns)
            .timing("miss_ns", self.miss_ns)
            .timing("measured_ns", self.measured_ns)
            .timing("predicted_ns", self.predicted_ns())
            .timing("identity_error", self.identity_error())
            .counter("hit_comparisons", self.hit_comparisons)
            .counter("miss_comparisons", self.miss_comparisons)
            .counter("measured_comparisons", self.measured_comparisons)
            .counter("predicted_comparisons", self.predicted_comparisons())
    }
}

/// An engine holding a compacted Dense Forest, the backing store for walks.
pub fn walk_engine(base: &Path, forest: DenseForestSpec) -> Result<Engine> {
    let engine = fresh_engine(base, "slb-walk", forest.dim, Quantization::Int8, false)?;
    for v in forest.generate()?.rows {
        engine.atlas().insert(&v)?;
    }
    engine.compact()?;
    Ok(engine)
}

/// Runs one session's walk through the cache-first query path.
pub fn walk(engine: &Engine, drift: Drift, queries: usize, seed: u64) -> Result<WalkOutcome> {
    engine.slb().clear();
    engine.slb().reset_stats();
    let dim = engine.atlas().params().dim as usize;
    let qs: Vec<Vec<f32>> = ConversationalWalk::new(dim, drift, seed).take(queries).collect();
    let (mut hit_ns, mut miss_ns) = (0.0f64, 0.0f64);
    let (mut hit_c, mut miss_c) = (0u64, 0u64);
    let start = Instant::now();
    for q in &qs {
        let t = Instant::now();
        let r = engine.query_cached("walker", q)?;
        let ns = t.elapsed().as_nanos() as f64;
        if r.hit {
            hit_ns += ns;
            hit_c += r.comparisons;
        } else {
            miss_ns += ns;
            miss_c += r.comparisons;
        }
    }
    let total_ns = start.elapsed().as_nanos() as f64;
    let s = engine.slb().stats();
    let per = |x: f64, n: u64| if n == 0 { 0.0 } else { x / n as f64 };
    Ok(WalkOutcome {
        drift,
        dim,
        queries: qs.len(),
        hits: s.hits,
        misses: s.misses,
        hit_ns: per(hit_ns, s.hits),
        miss_ns: per(miss_ns, s.misses),
        measured_ns: total_ns / qs.len().max(1) as f64,
        hit_comparisons: per(hit_c as f64, s.hits),
        miss_comparisons: per(miss_c as f64, s.misses),
        measured_comparisons: (hit_c + miss_c) as f64 / qs.len().max(1) as f64,
    })
}

fn session_on_shard(shard: usize, tag: &str) -> String {
    (0u64..)
        .map(|i| format!("{tag}-{i}"))
        .find(|s| route(s).is_ok_and(|r| r == shard))
        .expect("every shard is reachable")
}

/// Interleaves random traffic from two sessions on distinct shards and
/// checks each shard against a replay of that session alone. Returns the
/// number of trials whose state differed.
pub fn isolation_trials(trials: usize, ops: usize, seed: u64) -> Result<usize> {
    let mut r = rng(seed);
    let dim = 16;
    let pool: Vec<Vec<f32>> = (0..48).map(|_| random_unit(&mut r, dim)).collect();
    let mut violations = 0;
    for t in 0..trials {
        let sa = r.gen_range(0..SLB_SHARDS);
        let sb = (sa + r.gen_range(1..SLB_SHARDS)) % SLB_SHARDS;
        let (a, b) = (session_on_shard(sa, &format!("a{t}")), session_on_shard(sb, &format!("b{t}")));
        let config = SlbConfig::new(dim).with_hit_threshold(0.5);
        let (mixed, only_a, only_b) = (Slb::new(config)?, Slb::new(config)?, Slb::new(config)?);
        for _ in 0..ops {
            let first = r.gen_bool(0.5);
            let (sid, alone) = if first { (&a, &only_a) } else { (&b, &only_b) };
            let v = &pool[r.gen_range(0..pool.len())];
            if r.gen_bool(0.5) {
                let node = r.gen_range(1..200u64);
                mixed.insert(sid, SlbVector::Fp32(v), node)?;
                alone.insert(sid, SlbVector::Fp32(v), node)?;
            } else {
                mixed.lookup(sid, v)?;
                alone.lookup(sid, v)?;
            }
        }
        let others_empty = (0..SLB_SHARDS).filter(|&s| s != sa && s != sb).all(|s| mixed.occupancy(s) == 0);
        let same = |x: &Slb, y: &Slb, s: usize| x.shard_entries(s) == y.shard_entries(s);
        if !(same(&mixed, &only_a, sa) && same(&mixed, &only_b, sb) && others_empty) {
            violations += 1;
        }
    }
    Ok(violations)
}
