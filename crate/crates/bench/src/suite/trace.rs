//! Episodic trace: two-phase search cost and accuracy, and garbage
//! collection of deleted events.

use std::path::Path;

use aeon_core::atlas::Quantization;
use aeon_core::trace::{EventKind, BLOCK_EVENTS};
use anyhow::Result;
use rand::Rng;

use super::{fresh_engine, time_ns};
use crate::dataset::{nudge, random_unit, rng};
use crate::report::{Record, REPEATS};

#[derive(Debug, Clone, Copy)]
pub struct TraceParams {
    pub events: usize,
    pub dim: usize,
    pub k_blocks: usize,
    pub queries: usize,
    /// Events per topic before the history moves to a new one.
    pub topic_length: usize,
    pub seed: u64,
}

impl TraceParams {
    pub fn new(events: usize, dim: usize) -> TraceParams {
        TraceParams { events, dim, k_blocks: 3, queries: 500, topic_length: 700, seed: 1 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SearchOutcome {
    pub events: usize,
    pub k_blocks: usize,
    pub queries: usize,
    pub blocks: u64,
    /// `ceil(events / BLOCK_EVENTS) + k * BLOCK_EVENTS`.
    pub bound: u64,
    pub max_comparisons: u64,
    pub mean_comparisons: f64,
    pub bound_violations: u64,
    pub top1_agreement: f64,
    pub two_phase_ns: Vec<Vec<f64>>,
    pub full_scan_ns: Vec<Vec<f64>>,
}

fn text(i: usize) -> Vec<u8> {
    format!("turn {i}").into_bytes()
}

/// History whose topic drifts every `topic_length` events; queries are
/// perturbed copies of past events.
pub fn run_search(base: &Path, p: TraceParams) -> Result<SearchOutcome> {
    let engine = fresh_engine(base, "trace-search", p.dim, Quantization::Fp32, false)?;
    let t = engine.trace();
    let mut r = rng(p.seed);
    let mut topic = random_unit(&mut r, p.dim);
    let mut history = Vec::with_capacity(p.events);
    for i in 0..p.events {
        if i % p.topic_length.max(1) == 0 {
            topic = random_unit(&mut r, p.dim);
        }
        let v = nudge(&mut r, &topic, 0.5);
        t.append_event(EventKind::User, &text(i), &v, &[])?;
        history.push(v);
    }
    let queries: Vec<Vec<f32>> = (0..p.queries)
        .map(|_| {
            let i = r.gen_range(0..history.len());
            nudge(&mut r, &history[i], 0.2)
        })
        .collect();

    let blocks = (p.events as u64).div_ceil(BLOCK_EVENTS);
    let bound = blocks + p.k_blocks as u64 * BLOCK_EVENTS;
    let mut out = SearchOutcome {
        events: p.events,
        k_blocks: p.k_blocks,
        queries: queries.len(),
        blocks,
        bound,
        ..Default::default()
    };
    let (mut agree, mut total) = (0usize, 0u64);
    for q in &queries {
        let s = t.search(q, p.k_blocks, 1)?;
        let full = t.full_scan(q, 1)?;
        total += s.comparisons;
        out.max_comparisons = out.max_comparisons.max(s.comparisons);
        out.bound_violations += u64::from(s.comparisons > bound);
        agree += usize::from(s.hits.first().map(|h| h.0) == full.hits.first().map(|h| h.0));
    }
    let nq = queries.len().max(1) as f64;
    out.mean_comparisons = total as f64 / nq;
    out.top1_agreement = agree as f64 / nq;

    for _ in 0..REPEATS {
        let (mut two, mut full) = (Vec::new(), Vec::new());
        for q in &queries {
            let (res, ns) = time_ns(|| t.search(q, p.k_blocks, 1));
            res?;
            two.push(ns);
            let (res, ns) = time_ns(|| t.full_scan(q, 1));
            res?;
            full.push(ns);
        }
        out.two_phase_ns.push(two);
        out.full_scan_ns.push(full);
    }
    Ok(out)
}

impl SearchOutcome {
    pub fn records(&self) -> Vec<Record> {
        vec![
            Record::from_repeats("trace.search", "ns", &self.two_phase_ns)
                .param("events", self.events)
                .param("k_blocks", self.k_blocks)
                .counter("blocks", self.blocks)
                .counter("comparison_bound", self.bound)
                .counter("max_comparisons", self.max_comparisons)
                .counter("mean_comparisons", self.mean_comparisons)
                .counter("bound_violations", self.bound_violations)
                .counter("top1_agreement", self.top1_agreement),
            Record::from_repeats("trace.full_scan", "ns", &self.full_scan_ns)
                .param("events", self.events)
                .counter("comparisons", self.events as u64),
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct GcOutcome {
    pub events: usize,
    pub retained: u64,
    pub event_count_after: u64,
    pub live_count_after: u64,
    /// Retained ids that went missing plus deleted ids still readable.
    pub wrong_ids: u64,
    pub text_mismatches: u64,
    pub blob_bytes_before: u64,
    pub blob_bytes_after: u64,
    pub compaction_ns: f64,
}

impl GcOutcome {
    pub fn exact(&self) -> bool {
        self.event_count_after == self.retained
            && self.live_count_after == self.retained
            && self.wrong_ids == 0
            && self.text_mismatches == 0
    }

    pub fn record(&self) -> Record {
        Record::counters_only("trace.gc")
            .param("events", self.events)
            .param("retain_ratio", 0.5)
            .counter("retained", self.retained)
            .counter("event_count_after", self.event_count_after)
            .counter("live_count_after", self.live_count_after)
            .counter("wrong_ids", self.wrong_ids)
            .counter("text_mismatches", self.text_mismatches)
            .counter("blob_bytes_before", self.blob_bytes_before)
            .counter("blob_bytes_after", self.blob_bytes_after)
            .timing("compaction_ns", self.compaction_ns)
    }
}

/// Appends `events`, deletes every odd id, compacts and checks that exactly
/// the even ids remain.
pub fn run_gc(base: &Path, events: usize, dim: usize, seed: u64) -> Result<GcOutcome> {
    let engine = fresh_engine(base, "trace-gc", dim, Quantization::Fp32, false)?;
    let t = engine.trace();
    let mut r = rng(seed);
    for i in 0..events {
        t.append_event(EventKind::System, &text(i), &random_unit(&mut r, dim), &[])?;
    }
    let keep = |id: u64| id.is_multiple_of(2);
    for id in (1..=events as u64).filter(|&id| !keep(id)) {
        t.tombstone_event(id)?;
    }
    let blob_bytes_before = t.stats().blob_bytes;
    let (res, compaction_ns) = time_ns(|| engine.compact());
    res?;
    let st = t.stats();
    let mut out = GcOutcome {
        events,
        retained: (1..=events as u64).filter(|&id| keep(id)).count() as u64,
        event_count_after: st.event_count,
        live_count_after: st.live_count,
        blob_bytes_before,
        blob_bytes_after: st.blob_bytes,
        compaction_ns,
        ..Default::default()
    };
    for id in 1..=events as u64 {
        let present = t.get_event(id).is_some();
        if present != keep(id) {
            out.wrong_ids += 1;
        } else if present && t.read_text(id)? != text(id as usize - 1) {
            out.text_mismatches += 1;
        }
    }
    Ok(out)
}
