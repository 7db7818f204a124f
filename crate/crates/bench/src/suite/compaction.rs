//! Shadow compaction: equivalence, garbage removal, log reset and the size
//! independence of the locked sections.

use std::path::Path;

use aeon_core::atlas::Quantization;
use aeon_core::engine::WAL_FILE;
use aeon_core::trace::EventKind;
use aeon_core::wal;
use anyhow::Result;
use rand::Rng;

use super::fresh_engine;
use crate::dataset::{nudge, rng, DenseForestSpec};
use crate::report::Record;

#[derive(Debug, Clone, Copy)]
pub struct CompactionParams {
    pub forest: DenseForestSpec,
    pub events: usize,
    pub queries: usize,
    /// Every `tombstone_every`-th node and event is deleted.
    pub tombstone_every: u64,
}

impl CompactionParams {
    pub fn new(n: usize, dim: usize) -> CompactionParams {
        CompactionParams {
            forest: DenseForestSpec::new(n, dim),
            events: n,
            queries: 1000,
            tombstone_every: 3,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CompactionOutcome {
    pub n: usize,
    pub events: usize,
    pub queries: usize,
    /// Queries whose exact answer changed across the compaction.
    pub answer_mismatches: u64,
    /// Live ids whose vector differs or that disappeared.
    pub live_mismatches: u64,
    pub live_nodes: u64,
    pub sealed_nodes_after: u64,
    pub tombstoned_nodes_visible: u64,
    pub live_events: u64,
    pub sealed_events_after: u64,
    pub tombstoned_events_visible: u64,
    pub blob_bytes_after: u64,
    pub live_blob_bytes: u64,
    pub replay_records: u64,
    pub replay_torn_bytes: u64,
    pub freeze_ops: u32,
    pub swap_ops: u32,
    pub freeze_ns: f64,
    pub copy_ns: f64,
    pub swap_ns: f64,
    pub nodes_copied: u64,
    pub events_copied: u64,
    pub blobs_copied: u64,
    pub bytes_reclaimed: u64,
    pub wal_bytes_discarded: u64,
}

impl CompactionOutcome {
    pub fn garbage_free(&self) -> bool {
        self.sealed_nodes_after == self.live_nodes
            && self.tombstoned_nodes_visible == 0
            && self.sealed_events_after == self.live_events
            && self.tombstoned_events_visible == 0
            && self.blob_bytes_after == self.live_blob_bytes
    }
}

fn event_text(i: u64) -> Vec<u8> {
    format!("event {i}: ").repeat(1 + (i % 7) as usize).into_bytes()
}

pub fn run(base: &Path, p: CompactionParams) -> Result<CompactionOutcome> {
    let f = p.forest;
    let engine = fresh_engine(base, &format!("compaction-{}", f.n), f.dim, Quantization::Int8, true)?;
    let (atlas, trace) = (engine.atlas(), engine.trace());
    let data = f.generate()?;
    let mut r = rng(f.seed ^ 0x5EED);

    // Half the nodes sealed in a first generation, half left in the delta.
    let half = data.len() / 2;
    for v in &data.rows[..half] {
        atlas.insert(v)?;
    }
    for i in 0..p.events as u64 {
        let emb = &data.rows[i as usize % data.len()];
        trace.append_event(EventKind::User, &event_text(i), emb, &[])?;
    }
    engine.compact()?;
    for v in &data.rows[half..] {
        atlas.insert(v)?;
    }
    let every = p.tombstone_every.max(2);
    let dead_node = |id: u64| id.is_multiple_of(every);
    for id in (1..=data.len() as u64).filter(|&id| dead_node(id)) {
        atlas.tombstone(id)?;
    }
    for id in (1..=p.events as u64).filter(|&id| dead_node(id)) {
        trace.tombstone_event(id)?;
    }

    let queries: Vec<Vec<f32>> = (0..p.queries)
        .map(|_| {
            let i = r.gen_range(0..data.len());
            nudge(&mut r, &data.rows[i], 0.3)
        })
        .collect();
    let before: Vec<u64> = queries.iter().map(|q| atlas.flat_scan(q).map(|s| s.id)).collect::<Result<_, _>>()?;
    let live_before: Vec<(u64, Vec<f32>)> = (1..=data.len() as u64)
        .filter_map(|id| atlas.get_vector(id).map(|v| (id, v)))
        .collect();

    let s = engine.compact()?;

    let mut out = CompactionOutcome {
        n: data.len(),
        events: p.events,
        queries: queries.len(),
        freeze_ops: s.freeze_ops,
        swap_ops: s.swap_ops,
        freeze_ns: s.freeze_duration.as_nanos() as f64,
        copy_ns: s.copy_duration.as_nanos() as f64,
        swap_ns: s.swap_duration.as_nanos() as f64,
        nodes_copied: s.nodes_copied,
        events_copied: s.events_copied,
        blobs_copied: s.blobs_copied,
        bytes_reclaimed: s.bytes_reclaimed,
        wal_bytes_discarded: s.wal_bytes_discarded,
        ..Default::default()
    };
    for (q, want) in queries.iter().zip(&before) {
        out.answer_mismatches += u64::from(atlas.flat_scan(q)?.id != *want);
    }
    for (id, v) in &live_before {
        out.live_mismatches += u64::from(atlas.get_vector(*id).as_ref() != Some(v));
    }
    out.live_nodes = live_before.len() as u64;
    let st = atlas.stats();
    out.sealed_nodes_after = st.node_count;
    out.tombstoned_nodes_visible = (1..=data.len() as u64)
        .filter(|&id| dead_node(id) && (atlas.is_live(id) || atlas.get_vector(id).is_some()))
        .count() as u64;

    let ts = trace.stats();
    out.live_events = (1..=p.events as u64).filter(|&id| !dead_node(id)).count() as u64;
    out.sealed_events_after = ts.event_count;
    out.tombstoned_events_visible = (1..=p.events as u64)
        .filter(|&id| dead_node(id) && trace.get_event(id).is_some())
        .count() as u64;
    out.blob_bytes_after = ts.blob_bytes;
    out.live_blob_bytes = (0..p.events as u64)
        .filter(|i| !dead_node(i + 1))
        .map(|i| event_text(i).len() as u64)
        .sum();

    let replay = wal::replay(engine.dir().join(WAL_FILE), |_| Ok(()))?;
    out.replay_records = replay.records_applied;
    out.replay_torn_bytes = replay.torn_bytes_discarded;
    Ok(out)
}

impl CompactionOutcome {
    pub fn record(&self) -> Record {
        Record::counters_only("compaction")
            .param("n", self.n)
            .param("events", self.events)
            .param("queries", self.queries)
            .counter("answer_mismatches", self.answer_mismatches)
            .counter("live_mismatches", self.live_mismatches)
            .counter("live_nodes", self.live_nodes)
            .counter("sealed_nodes_after", self.sealed_nodes_after)
            .counter("tombstoned_nodes_visible", self.tombstoned_nodes_visible)
            .counter("live_events", self.live_events)
            .counter("sealed_events_after", self.sealed_events_after)
            .counter("tombstoned_events_visible", self.tombstoned_events_visible)
            .counter("blob_bytes_after", self.blob_bytes_after)
            .counter("live_blob_bytes", self.live_blob_bytes)
            .counter("replay_records", self.replay_records)
            .counter("replay_torn_bytes", self.replay_torn_bytes)
            .counter("freeze_ops", self.freeze_ops)
            .counter("swap_ops", self.swap_ops)
            .counter("nodes_copied", self.nodes_copied)
            .counter("events_copied", self.events_copied)
            .counter("blobs_copied", self.blobs_copied)
            .counter("bytes_reclaimed", self.bytes_reclaimed)
            .counter("wal_bytes_discarded", self.wal_bytes_discarded)
    }

    pub fn timing_records(repeats: &[CompactionOutcome]) -> Vec<Record> {
        let n = repeats.first().map_or(0, |o| o.n);
        let phase = |name: &str, f: fn(&CompactionOutcome) -> f64| {
            let samples: Vec<Vec<f64>> = repeats.iter().map(|o| vec![f(o)]).collect();
            Record::from_repeats(name, "ns", &samples).param("n", n)
        };
        vec![
            phase("compaction.freeze", |o| o.freeze_ns),
            phase("compaction.copy", |o| o.copy_ns),
            phase("compaction.swap", |o| o.swap_ns),
        ]
    }
}
