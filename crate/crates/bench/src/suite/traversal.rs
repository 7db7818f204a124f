//! Index build, traversal depth and cost, recall, and file sizes.

use std::path::Path;

use aeon_core::atlas::Quantization;
use anyhow::Result;

use super::{fresh_engine, time_ns};
use crate::dataset::{Dataset, DenseForestSpec};
use crate::report::{Record, REPEATS};

#[derive(Debug, Clone, Copy)]
pub struct TraversalParams {
    pub forest: DenseForestSpec,
    pub quantization: Quantization,
    pub queries: usize,
    /// Compare every query against an exact scan.
    pub recall: bool,
    pub timing_repeats: usize,
}

impl TraversalParams {
    pub fn new(n: usize, dim: usize, quantization: Quantization) -> TraversalParams {
        TraversalParams {
            forest: DenseForestSpec::new(n, dim),
            quantization,
            queries: 1000,
            recall: true,
            timing_repeats: REPEATS,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TraversalOutcome {
    pub n: usize,
    pub dim: usize,
    pub quantization: String,
    pub stride: u64,
    pub slot_capacity: u64,
    pub file_bytes: u64,
    pub depth: u64,
    pub delta_nodes: u64,
    pub build_seconds: f64,
    pub queries: usize,
    pub mean_hops: f64,
    pub min_hops: u32,
    pub max_hops: u32,
    pub mean_comparisons: f64,
    pub max_comparisons: u64,
    /// Comparisons of an exact scan: one per live node.
    pub flat_comparisons: u64,
    pub recall_greedy: Option<f64>,
    pub recall_beam1: Option<f64>,
    pub recall_beam3: Option<f64>,
    pub recall_beam3_csls: Option<f64>,
    pub greedy_ns: Vec<Vec<f64>>,
    pub flat_ns: Vec<Vec<f64>>,
}

/// Self-queries: every `n / queries`-th stored vector.
fn query_rows(data: &Dataset, queries: usize) -> Vec<&[f32]> {
    let step = (data.len() / queries.max(1)).max(1);
    data.rows.iter().step_by(step).take(queries).map(|v| v.as_slice()).collect()
}

pub fn run(base: &Path, p: TraversalParams, data: &Dataset) -> Result<TraversalOutcome> {
    let name = format!("traversal-{}-{}", p.quantization.name(), data.len());
    let engine = fresh_engine(base, &name, data.dim, p.quantization, false)?;
    let atlas = engine.atlas();
    let (built, build_ns) = time_ns(|| -> Result<()> {
        for v in &data.rows {
            atlas.insert(v)?;
        }
        engine.compact()?;
        Ok(())
    });
    built?;
    let stats = atlas.stats();
    let qs = query_rows(data, p.queries);

    let mut out = TraversalOutcome {
        n: data.len(),
        dim: data.dim,
        quantization: p.quantization.name().to_string(),
        stride: atlas.params().stride() as u64,
        slot_capacity: stats.slot_capacity,
        file_bytes: std::fs::metadata(atlas.file_path())?.len(),
        depth: stats.depth,
        delta_nodes: stats.delta_nodes,
        build_seconds: build_ns / 1e9,
        queries: qs.len(),
        flat_comparisons: stats.live_count,
        min_hops: u32::MAX,
        ..Default::default()
    };

    let (mut hops, mut comps) = (0u64, 0u64);
    let mut hits = [0usize; 4];
    for q in &qs {
        let g = atlas.query_greedy(q)?;
        hops += u64::from(g.hops);
        comps += g.comparisons;
        out.min_hops = out.min_hops.min(g.hops);
        out.max_hops = out.max_hops.max(g.hops);
        out.max_comparisons = out.max_comparisons.max(g.comparisons);
        if p.recall {
            let exact = atlas.flat_scan(q)?;
            let answers = [
                g.id,
                atlas.query_beam(q, 1, false)?.id,
                atlas.query_beam(q, 3, false)?.id,
                atlas.query_beam(q, 3, true)?.id,
            ];
            for (h, a) in hits.iter_mut().zip(answers) {
                *h += usize::from(a == exact.id);
            }
        }
    }
    let nq = qs.len().max(1) as f64;
    out.mean_hops = hops as f64 / nq;
    out.mean_comparisons = comps as f64 / nq;
    if p.recall {
        let r = hits.map(|h| h as f64 / nq);
        out.recall_greedy = Some(r[0]);
        out.recall_beam1 = Some(r[1]);
        out.recall_beam3 = Some(r[2]);
        out.recall_beam3_csls = Some(r[3]);
    }

    for _ in 0..p.timing_repeats {
        let mut samples = Vec::with_capacity(qs.len());
        for q in &qs {
            let (r, ns) = time_ns(|| atlas.query_greedy(q));
            r?;
            samples.push(ns);
        }
        out.greedy_ns.push(samples);
        if p.recall {
            let mut samples = Vec::with_capacity(qs.len());
            for q in &qs {
                let (r, ns) = time_ns(|| atlas.flat_scan(q));
                r?;
                samples.push(ns);
            }
            out.flat_ns.push(samples);
        }
    }
    Ok(out)
}

impl TraversalOutcome {
    pub fn records(&self) -> Vec<Record> {
        let opt = |v: Option<f64>| v.map_or(serde_json::Value::Null, serde_json::Value::from);
        let mut greedy = Record::from_repeats("traversal.greedy", "ns", &self.greedy_ns)
            .param("n", self.n)
            .param("dim", self.dim)
            .param("quantization", self.quantization.as_str())
            .counter("stride_bytes", self.stride)
            .counter("slot_capacity", self.slot_capacity)
            .counter("file_bytes", self.file_bytes)
            .counter("depth", self.depth)
            .timing("build_seconds", self.build_seconds)
            .counter("mean_hops", self.mean_hops)
            .counter("min_hops", self.min_hops)
            .counter("max_hops", self.max_hops)
            .counter("mean_comparisons", self.mean_comparisons)
            .counter("max_comparisons", self.max_comparisons)
            .counter("flat_comparisons", self.flat_comparisons)
            .counter("comparison_reduction", self.flat_comparisons as f64 / self.mean_comparisons)
            .counter("recall_at_1_greedy", opt(self.recall_greedy))
            .counter("recall_at_1_beam1", opt(self.recall_beam1))
            .counter("recall_at_1_beam3", opt(self.recall_beam3))
            .counter("recall_at_1_beam3_csls", opt(self.recall_beam3_csls));
        if !self.greedy_ns.is_empty() && !self.flat_ns.is_empty() {
            let flat = crate::stats::median(
                &self.flat_ns.iter().map(|r| crate::stats::Summary::of(r).mean).collect::<Vec<_>>(),
            );
            let per_query = greedy.median.unwrap_or(f64::NAN);
            greedy = greedy.timing("wall_clock_speedup", flat / per_query);
        }
        let mut recs = vec![greedy];
        if !self.flat_ns.is_empty() {
            recs.push(
                Record::from_repeats("traversal.flat_scan", "ns", &self.flat_ns)
                    .param("n", self.n)
                    .param("dim", self.dim)
                    .param("quantization", self.quantization.as_str()),
            );
        }
        recs
    }
}

/// INT8 to FP32 file-size ratio at equal slot capacity.
pub fn size_ratio(fp32: &TraversalOutcome, int8: &TraversalOutcome) -> Record {
    Record::counters_only("traversal.file_size_ratio")
        .param("n", fp32.n)
        .param("dim", fp32.dim)
        .counter("fp32_stride", fp32.stride)
        .counter("int8_stride", int8.stride)
        .counter("stride_ratio", int8.stride as f64 / fp32.stride as f64)
        .counter("fp32_file_bytes", fp32.file_bytes)
        .counter("int8_file_bytes", int8.file_bytes)
        .counter("file_ratio", int8.file_bytes as f64 / fp32.file_bytes as f64)
}
