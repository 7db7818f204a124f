//! Insert cost with the log on and off, plus the lock co-hold audit.

use std::path::Path;
use std::time::Instant;

use aeon_core::atlas::Quantization;
use aeon_core::sync::lock_audit;
use anyhow::Result;

use super::fresh_engine;
use crate::dataset::{Dataset, DenseForestSpec};
use crate::report::{Record, REPEATS};
use crate::stats::median;

#[derive(Debug, Clone, Copy)]
pub struct WalParams {
    pub forest: DenseForestSpec,
    pub quantization: Quantization,
    pub repeats: usize,
}

impl WalParams {
    pub fn new(n: usize, dim: usize) -> WalParams {
        WalParams {
            forest: DenseForestSpec::new(n, dim),
            quantization: Quantization::Fp32,
            repeats: REPEATS,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct WalOutcome {
    pub n: usize,
    pub dim: usize,
    /// Inserts per second, one value per repetition.
    pub on_throughput: Vec<f64>,
    pub off_throughput: Vec<f64>,
    pub on_ns: Vec<Vec<f64>>,
    pub off_ns: Vec<Vec<f64>>,
    pub log_bytes: u64,
    pub log_acquisitions: u64,
    pub delta_acquisitions: u64,
    pub co_held: u64,
}

impl WalOutcome {
    /// Median throughput with the log on over median throughput with it off.
    pub fn ratio(&self) -> f64 {
        median(&self.on_throughput) / median(&self.off_throughput)
    }
}

fn insert_all(base: &Path, data: &Dataset, q: Quantization, wal: bool) -> Result<(f64, Vec<f64>, u64)> {
    let engine = fresh_engine(base, if wal { "wal-on" } else { "wal-off" }, data.dim, q, wal)?;
    let mut samples = Vec::with_capacity(data.len());
    let start = Instant::now();
    for v in &data.rows {
        let t = Instant::now();
        engine.atlas().insert(v)?;
        samples.push(t.elapsed().as_nanos() as f64);
    }
    let throughput = data.len() as f64 / start.elapsed().as_secs_f64();
    Ok((throughput, samples, engine.wal().len()))
}

pub fn run(base: &Path, p: WalParams, data: &Dataset) -> Result<WalOutcome> {
    let before = lock_audit();
    let mut out = WalOutcome { n: data.len(), dim: data.dim, ..Default::default() };
    for rep in 0..p.repeats {
        // Alternate the order so page-cache warmth favours neither side.
        let order = if rep % 2 == 0 { [true, false] } else { [false, true] };
        for wal in order {
            let (tput, samples, bytes) = insert_all(base, data, p.quantization, wal)?;
            if wal {
                out.on_throughput.push(tput);
                out.on_ns.push(samples);
                out.log_bytes = bytes;
            } else {
                out.off_throughput.push(tput);
                out.off_ns.push(samples);
            }
        }
    }
    let after = lock_audit();
    out.log_acquisitions = after.log_acquisitions - before.log_acquisitions;
    out.delta_acquisitions = after.delta_acquisitions - before.delta_acquisitions;
    out.co_held = after.co_held - before.co_held;
    Ok(out)
}

impl WalOutcome {
    pub fn records(&self) -> Vec<Record> {
        vec![
            Record::from_repeats("wal.insert_on", "ns", &self.on_ns)
                .param("n", self.n)
                .param("dim", self.dim)
                .timing("median_inserts_per_second", median(&self.on_throughput))
                .counter("log_bytes", self.log_bytes),
            Record::from_repeats("wal.insert_off", "ns", &self.off_ns)
                .param("n", self.n)
                .param("dim", self.dim)
                .timing("median_inserts_per_second", median(&self.off_throughput)),
            Record::counters_only("wal.overhead")
                .param("n", self.n)
                .param("dim", self.dim)
                .timing("throughput_ratio_on_off", self.ratio())
                .counter("log_lock_acquisitions", self.log_acquisitions)
                .counter("delta_lock_acquisitions", self.delta_acquisitions)
                .counter("co_held", self.co_held),
        ]
    }
}
