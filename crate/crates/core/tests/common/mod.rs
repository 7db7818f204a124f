#![allow(dead_code)]

use std::path::Path;

use aeon_core::atlas::Quantization;
use aeon_core::kernels::normalize;
use aeon_core::{Engine, EngineConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let mut v = gaussian(rng, dim);
    normalize(&mut v);
    v
}

/// Unit vectors scattered around `clusters` random centers.
pub fn forest(n: usize, dim: usize, clusters: usize, spread: f32, seed: u64) -> Vec<Vec<f32>> {
    let mut r = rng(seed);
    let centers: Vec<Vec<f32>> = (0..clusters).map(|_| random_unit(&mut r, dim)).collect();
    let k = spread / (dim as f32).sqrt();
    (0..n)
        .map(|i| {
            let c = &centers[i % clusters];
            let mut v: Vec<f32> = c.iter().map(|x| x + k * r.sample::<f32, _>(StandardNormal)).collect();
            normalize(&mut v);
            v
        })
        .collect()
}

/// `v` moved by a random step of length `step`, renormalized.
pub fn nudge(rng: &mut impl Rng, v: &[f32], step: f32) -> Vec<f32> {
    let d = random_unit(rng, v.len());
    let mut out: Vec<f32> = v.iter().zip(&d).map(|(a, b)| a + step * b).collect();
    normalize(&mut out);
    out
}

pub fn engine(dir: &Path, dim: u32, q: Quantization, wal: bool) -> Engine {
    Engine::create(dir, EngineConfig::new(dim, q).unwrap().with_wal(wal)).unwrap()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}
