//! Benchmarks. Each one returns a typed outcome holding raw samples and
//! counters, and converts it into report records.

pub mod compaction;
pub mod ebr;
pub mod kernels;
pub mod slb;
pub mod trace;
pub mod traversal;
pub mod wal;

use std::path::{Path, PathBuf};
use std::time::Instant;

use aeon_core::atlas::Quantization;
use aeon_core::{Engine, EngineConfig};
use anyhow::{Context, Result};

/// Creates `base/name`, deleting whatever was there before.
pub fn scratch_dir(base: &Path, name: &str) -> Result<PathBuf> {
    let dir = base.join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn fresh_engine(base: &Path, name: &str, dim: usize, q: Quantization, wal: bool) -> Result<Engine> {
    let dir = scratch_dir(base, name)?;
    let config = EngineConfig::new(dim as u32, q)?.with_wal(wal);
    Ok(Engine::create(&dir, config)?)
}

/// Nanoseconds taken by `f`.
#[inline]
pub fn time_ns<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_nanos() as f64)
}

