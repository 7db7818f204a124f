//! Similarity and quantization kernels.
//!
//! The scalar functions in [`scalar`] define the behaviour. The dispatched
//! entry points ([`dot_f32`], [`dot_i8`]) pick an AVX2 path at runtime when
//! the CPU has one; integer results are bit-identical to the scalar path and
//! FP32 results agree to within 1e-5 for unit-norm inputs.
//!
//! Symmetric INT8 quantization maps a vector onto `[-127, 127]` with one FP32
//! scale per vector: `scale = max|v_i| / 127` and
//! `q_i = clamp(round(v_i / scale), -127, 127)`, rounding half away from zero.
//! An all-zero vector gets scale `1.0`.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Largest quantized magnitude. `-128` is never produced.
pub const QUANT_MAX: i8 = 127;

/// Largest dimension for which the `i32` accumulator of [`dot_i8`] cannot
/// overflow: `4096 * 127^2 < 2^31`.
pub const MAX_INT8_DIMENSION: usize = 4096;

/// Tolerance on `| ||v|| - 1 |` for vectors that claim to be unit-norm.
pub const NORM_TOLERANCE: f32 = 1e-4;

/// An INT8 vector with its dequantization scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    values: Vec<i8>,
    scale: f32,
}

impl QuantizedVector {
    pub fn new(values: Vec<i8>, scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("quantization scale {scale} must be finite and > 0")));
        }
        if values.contains(&i8::MIN) {
            return Err(Error::invalid("quantized value -128 is outside [-127, 127]"));
        }
        Ok(QuantizedVector { values, scale })
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Quantizes `v` to symmetric INT8.
pub fn quantize(v: &[f32]) -> Result<QuantizedVector> {
    if v.is_empty() {
        return Err(Error::invalid("cannot quantize an empty vector"));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("component {i} is not finite")));
    }
    let mut values = vec![0i8; v.len()];
    let scale = quantize_into(v, &mut values);
    Ok(QuantizedVector { values, scale })
}

/// Quantizes into a caller-provided buffer and returns the scale.
///
/// Inputs must be finite; `out.len()` must equal `v.len()`. The ratio
/// `v_i / scale` is evaluated in f64 as `v_i * 127 / max`, so exact halves
/// such as `-63.5` are not disturbed by the FP32 rounding of the scale.
pub fn quantize_into(v: &[f32], out: &mut [i8]) -> f32 {
    debug_assert_eq!(v.len(), out.len());
    let max = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    if max == 0.0 {
        out.fill(0);
        return 1.0;
    }
    let factor = f64::from(QUANT_MAX) / f64::from(max);
    for (o, &x) in out.iter_mut().zip(v) {
        let r = (f64::from(x) * factor).round();
        *o = r.clamp(-f64::from(QUANT_MAX), f64::from(QUANT_MAX)) as i8;
    }
    (f64::from(max) / f64::from(QUANT_MAX)) as f32
}

/// Expands a quantized vector back to FP32: `out_i = q_i * scale`.
pub fn dequantize(q: &QuantizedVector) -> Vec<f32> {
    let mut out = vec![0.0; q.len()];
    dequantize_into(&q.values, q.scale, &mut out);
    out
}

pub fn dequantize_into(values: &[i8], scale: f32, out: &mut [f32]) {
    debug_assert_eq!(values.len(), out.len());
    for (o, &q) in out.iter_mut().zip(values) {
        *o = f32::from(q) * scale;
    }
}

/// FP32 inner product; cosine similarity for unit-norm inputs.
pub fn dot_fp32(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(dot_f32(a, b))
}

/// INT8 inner product rescaled by both vectors' scales.
pub fn dot_int8(a: &QuantizedVector, b: &QuantizedVector) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() > MAX_INT8_DIMENSION {
        return Err(Error::invalid(format!(
            "dimension {} exceeds the INT8 accumulator bound {MAX_INT8_DIMENSION}",
            a.len()
        )));
    }
    Ok(dot_i8(&a.values, &b.values) as f32 * (a.scale * b.scale))
}

type F32Kernel = fn(&[f32], &[f32]) -> f32;
type I8Kernel = fn(&[i8], &[i8]) -> i32;

fn f32_kernel() -> F32Kernel {
    static KERNEL: OnceLock<F32Kernel> = OnceLock::new();
    *KERNEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            return |a, b| unsafe { avx2::dot_f32(a, b) };
        }
        lanes::dot_f32
    })
}

fn i8_kernel() -> I8Kernel {
    static KERNEL: OnceLock<I8Kernel> = OnceLock::new();
    *KERNEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        if is_x86_feature_detected!("avx2") {
            return |a, b| unsafe { avx2::dot_i8(a, b) };
        }
        lanes::dot_i8
    })
}

/// Unchecked FP32 inner product. Lengths must match.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    f32_kernel()(a, b)
}

/// Unchecked raw INT8 inner product. Lengths must match and not exceed
/// [`MAX_INT8_DIMENSION`].
#[inline]
pub fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    i8_kernel()(a, b)
}

/// L2 norm accumulated in f64.
pub fn norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt() as f32
}

/// Scales `v` to unit length in place. Zero vectors are left untouched.
pub fn normalize(v: &mut [f32]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn is_normalized(v: &[f32]) -> bool {
    (norm(v) - 1.0).abs() <= NORM_TOLERANCE
}

/// Reference implementations.
pub mod scalar {
    pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
        a.iter().zip(b).map(|(&x, &y)| i32::from(x) * i32::from(y)).sum()
    }
}

/// Portable multi-accumulator loops that the compiler can vectorize.
mod lanes {
    const LANES: usize = 8;

    pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
        let mut acc = [0.0f32; LANES];
        let ca = a.chunks_exact(LANES);
        let cb = b.chunks_exact(LANES);
        let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
        for (x, y) in ca.zip(cb) {
            for i in 0..LANES {
                acc[i] += x[i] * y[i];
            }
        }
        (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
    }

    pub fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
        let mut acc = [0i32; 16];
        let ca = a.chunks_exact(16);
        let cb = b.chunks_exact(16);
        let tail = super::scalar::dot_i8(ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for i in 0..16 {
                acc[i] += i32::from(x[i]) * i32::from(y[i]);
            }
        }
        acc.iter().sum::<i32>() + tail
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len().min(b.len());
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut acc0 = _mm256_setzero_ps();
        let mut acc1 = _mm256_setzero_ps();
        let mut i = 0;
        while i + 16 <= n {
            acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(i)), _mm256_loadu_ps(pb.add(i)), acc0);
            acc1 = _mm256_fmadd_ps(
                _mm256_loadu_ps(pa.add(i + 8)),
                _mm256_loadu_ps(pb.add(i + 8)),
                acc1,
            );
            i += 16;
        }
        if i + 8 <= n {
            acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(i)), _mm256_loadu_ps(pb.add(i)), acc0);
            i += 8;
        }
        let acc = _mm256_add_ps(acc0, acc1);
        let hi = _mm256_extractf128_ps(acc, 1);
        let lo = _mm256_castps256_ps128(acc);
        let s = _mm_add_ps(hi, lo);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        let mut total = _mm_cvtss_f32(s);
        while i < n {
            total += *pa.add(i) * *pb.add(i);
            i += 1;
        }
        total
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
        let n = a.len().min(b.len());
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut acc = _mm256_setzero_si256();
        let mut i = 0;
        while i + 16 <= n {
            let x = _mm256_cvtepi8_epi16(_mm_loadu_si128(pa.add(i) as *const __m128i));
            let y = _mm256_cvtepi8_epi16(_mm_loadu_si128(pb.add(i) as *const __m128i));
            acc = _mm256_add_epi32(acc, _mm256_madd_epi16(x, y));
            i += 16;
        }
        let hi = _mm256_extracti128_si256(acc, 1);
        let lo = _mm256_castsi256_si128(acc);
        let s = _mm_add_epi32(hi, lo);
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b01_00_11_10));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b10_11_00_01));
        let mut total = _mm_cvtsi128_si32(s);
        while i < n {
            total += i32::from(*pa.add(i)) * i32::from(*pb.add(i));
            i += 1;
        }
        total
    }
}
