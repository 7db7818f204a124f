//! Quantization accuracy and single-pair kernel cost.

use std::hint::black_box;
use std::time::Instant;

use aeon_core::kernels::{dequantize, dot_fp32, dot_int8, quantize};

use crate::dataset::{random_unit, rng};
use crate::report::{Record, REPEATS};

#[derive(Debug, Clone, Copy)]
pub struct KernelParams {
    pub dim: usize,
    pub vectors: usize,
    pub pairs: usize,
    pub seed: u64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams { dim: 768, vectors: 1000, pairs: 10_000, seed: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct KernelOutcome {
    pub params: KernelParams,
    /// Largest `|v - dequantize(quantize(v))|` relative to `scale / 2`.
    pub max_error_ratio: f64,
    pub roundtrip_seconds: f64,
    pub mean_abs_delta: f64,
    pub max_abs_delta: f64,
    /// Per-repetition samples of nanoseconds per call.
    pub fp32_ns: Vec<Vec<f64>>,
    pub int8_ns: Vec<Vec<f64>>,
}

const CALLS_PER_SAMPLE: usize = 256;
const SAMPLES_PER_REPEAT: usize = 200;

pub fn run(p: KernelParams) -> KernelOutcome {
    let mut r = rng(p.seed);
    let start = Instant::now();
    let mut max_error_ratio = 0.0f64;
    for _ in 0..p.vectors {
        let v = random_unit(&mut r, p.dim);
        let q = quantize(&v).expect("finite input");
        let half = f64::from(q.scale()) / 2.0;
        for (a, b) in v.iter().zip(dequantize(&q)) {
            max_error_ratio = max_error_ratio.max(f64::from(a - b).abs() / half);
        }
    }
    let roundtrip_seconds = start.elapsed().as_secs_f64();

    let mut total = 0.0f64;
    let mut max_abs_delta = 0.0f64;
    let mut kept = Vec::new();
    for i in 0..p.pairs {
        let a = random_unit(&mut r, p.dim);
        let b = random_unit(&mut r, p.dim);
        let exact = dot_fp32(&a, &b).unwrap();
        let (qa, qb) = (quantize(&a).unwrap(), quantize(&b).unwrap());
        let d = f64::from(dot_int8(&qa, &qb).unwrap() - exact).abs();
        total += d;
        max_abs_delta = max_abs_delta.max(d);
        if i < 64 {
            kept.push((a, b, qa, qb));
        }
    }

    let mut fp32_ns = Vec::new();
    let mut int8_ns = Vec::new();
    for _ in 0..REPEATS {
        let (mut f, mut q) = (Vec::new(), Vec::new());
        for s in 0..SAMPLES_PER_REPEAT {
            let (a, b, qa, qb) = &kept[s % kept.len()];
            let t = Instant::now();
            for _ in 0..CALLS_PER_SAMPLE {
                black_box(dot_fp32(black_box(a), black_box(b)).unwrap());
            }
            f.push(t.elapsed().as_nanos() as f64 / CALLS_PER_SAMPLE as f64);
            let t = Instant::now();
            for _ in 0..CALLS_PER_SAMPLE {
                black_box(dot_int8(black_box(qa), black_box(qb)).unwrap());
            }
            q.push(t.elapsed().as_nanos() as f64 / CALLS_PER_SAMPLE as f64);
        }
        fp32_ns.push(f);
        int8_ns.push(q);
    }

    KernelOutcome {
        params: p,
        max_error_ratio,
        roundtrip_seconds,
        mean_abs_delta: total / p.pairs.max(1) as f64,
        max_abs_delta,
        fp32_ns,
        int8_ns,
    }
}

impl KernelOutcome {
    pub fn records(&self) -> Vec<Record> {
        let p = self.params;
        vec![
            Record::from_repeats("kernels.dot_fp32", "ns", &self.fp32_ns).param("dim", p.dim),
            Record::from_repeats("kernels.dot_int8", "ns", &self.int8_ns).param("dim", p.dim),
            Record::counters_only("kernels.quantization")
                .param("dim", p.dim)
                .param("vectors", p.vectors)
                .param("pairs", p.pairs)
                .param("seed", p.seed)
                .counter("max_error_over_half_scale", self.max_error_ratio)
                .timing("roundtrip_seconds", self.roundtrip_seconds)
                .counter("mean_abs_delta", self.mean_abs_delta)
                .counter("max_abs_delta", self.max_abs_delta),
        ]
    }
}
