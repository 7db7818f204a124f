//! Dense Forest vectors and the AEDV file format.
//!
//! AEDV layout, all little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "AEDV"
//!      4     8  row count (u64)
//!     12     4  dimension (u32)
//!     16     …  rows, count * dimension f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const AEDV_MAGIC: &[u8; 4] = b"AEDV";
pub const AEDV_HEADER_BYTES: usize = 16;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normalize(v: &mut [f32]) {
    aeon_core::kernels::normalize(v)
}

pub fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let mut v = gaussian(rng, dim);
    normalize(&mut v);
    v
}

/// Parameters of a clustered synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DenseForestSpec {
    pub n: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Norm of the expected perturbation around a cluster center.
    pub spread: f32,
    pub seed: u64,
}

impl DenseForestSpec {
    pub fn new(n: usize, dim: usize) -> DenseForestSpec {
        DenseForestSpec {
            n,
            dim,
            clusters: (n / 100).clamp(1, 1000),
            spread: 0.5,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim > 0, "dimension must be positive");
        ensure!(self.clusters > 0, "cluster count must be positive");
        ensure!(self.spread.is_finite() && self.spread >= 0.0, "spread must be finite and >= 0");
        Ok(())
    }

    /// Row `i` belongs to cluster `i % clusters` and equals
    /// `normalize(center + spread * g / sqrt(dim))` with `g` standard normal.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut r = rng(self.seed);
        let centers: Vec<Vec<f32>> = (0..self.clusters).map(|_| random_unit(&mut r, self.dim)).collect();
        let k = self.spread / (self.dim as f32).sqrt();
        let mut rows = Vec::with_capacity(self.n);
        let mut labels = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let c = i % self.clusters;
            let mut v: Vec<f32> = centers[c]
                .iter()
                .map(|x| x + k * r.sample::<f32, _>(StandardNormal))
                .collect();
            normalize(&mut v);
            rows.push(v);
            labels.push(c as u32);
        }
        Ok(Dataset { dim: self.dim, rows, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
    /// Cluster of each row; empty when read back from a file.
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn write_aedv(path: &Path, dim: usize, rows: &[Vec<f32>]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(AEDV_MAGIC)?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    w.write_all(&u32::try_from(dim).context("dimension too large")?.to_le_bytes())?;
    for (i, row) in rows.iter().enumerate() {
        ensure!(row.len() == dim, "row {i} has {} components, expected {dim}", row.len());
        for x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.into_inner()
        .map_err(|e| e.into_error())
        .and_then(|f| f.sync_all())
        .with_context(|| format!("writing {}", path.display()))
}

pub fn read_aedv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut header = [0u8; AEDV_HEADER_BYTES];
    r.read_exact(&mut header)
        .with_context(|| format!("{} is too short for a vector file header", path.display()))?;
    if &header[..4] != AEDV_MAGIC {
        bail!("{} is not a vector file (bad magic)", path.display());
    }
    let count = u64::from_le_bytes(header[4..12].try_into().unwrap());
    let dim = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let expected = count
        .checked_mul(dim as u64 * 4)
        .and_then(|b| b.checked_add(AEDV_HEADER_BYTES as u64));
    ensure!(
        expected == Some(file_len),
        "{}: header promises {count} rows of dimension {dim} but the file is {file_len} bytes",
        path.display()
    );
    let mut buf = vec![0u8; dim * 4];
    let mut rows = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        rows.push(buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
    }
    Ok(Dataset { dim, rows, labels: Vec::new() })
}

/// `v` moved by a random step of length `step` and renormalized.
pub fn nudge(rng: &mut impl Rng, v: &[f32], step: f32) -> Vec<f32> {
    let d = random_unit(rng, v.len());
    let mut out: Vec<f32> = v.iter().zip(&d).map(|(a, b)| a + step * b).collect();
    normalize(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_unit_and_deterministic() {
        let spec = DenseForestSpec { n: 50, dim: 16, clusters: 5, spread: 0.5, seed: 3 };
        let a = spec.generate().unwrap();
        assert_eq!(a, spec.generate().unwrap());
        assert!(a.rows.iter().all(|r| aeon_core::kernels::is_normalized(r)));
        assert_eq!(a.labels[..6], [0, 1, 2, 3, 4, 0]);
    }

    #[test]
    fn file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.aedv");
        let d = DenseForestSpec::new(7, 3).generate().unwrap();
        write_aedv(&path, 3, &d.rows).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 7 * 3 * 4);
        assert_eq!(read_aedv(&path).unwrap().rows, d.rows);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_aedv(&path).is_err());
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_aedv(&path).is_err());
    }
}
