mod common;

use aeon_core::kernels::{dequantize, dot_fp32, dot_i8, dot_int8, quantize, scalar, QUANT_MAX};
use common::{dot, gaussian, random_unit, rng};
use proptest::prelude::*;

/// Brute force: the code in [-127, 127] whose reconstruction is nearest.
fn nearest_code(x: f32, scale: f32) -> i8 {
    (-127i32..=127)
        .min_by(|a, b| {
            let da = (f64::from(*a) * f64::from(scale) - f64::from(x)).abs();
            let db = (f64::from(*b) * f64::from(scale) - f64::from(x)).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap() as i8
}

#[test]
fn roundtrip_error_is_at_most_half_a_step() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let v = random_unit(&mut r, 768);
        let q = quantize(&v).unwrap();
        let max = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        assert!((q.scale() - max / 127.0).abs() <= f32::EPSILON * q.scale());
        assert!(q.values().iter().any(|&c| c.abs() == QUANT_MAX));
        let back = dequantize(&q);
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() <= q.scale() / 2.0 * (1.0 + 1e-5), "{a} vs {b}");
        }
    }
}

#[test]
fn codes_match_the_nearest_representable_value() {
    let mut r = rng(2);
    for _ in 0..20 {
        let v = gaussian(&mut r, 300);
        let q = quantize(&v).unwrap();
        for (x, c) in v.iter().zip(q.values()) {
            assert_eq!(*c, nearest_code(*x, q.scale()), "x={x}");
        }
    }
}

#[test]
fn int8_similarity_tracks_fp32_at_768() {
    let mut r = rng(3);
    let mut total = 0.0f64;
    for _ in 0..10_000 {
        let a = random_unit(&mut r, 768);
        let b = random_unit(&mut r, 768);
        let exact = dot(&a, &b);
        let approx = dot_int8(&quantize(&a).unwrap(), &quantize(&b).unwrap()).unwrap();
        total += (f64::from(approx) - exact).abs();
    }
    let mean = total / 10_000.0;
    assert!(mean < 0.01, "mean |delta| = {mean}");
}

#[test]
fn fp32_dot_matches_f64_reference() {
    let mut r = rng(4);
    for dim in [1, 7, 8, 15, 16, 33, 384, 768, 1536] {
        let a = random_unit(&mut r, dim);
        let b = random_unit(&mut r, dim);
        let got = dot_fp32(&a, &b).unwrap();
        assert!((f64::from(got) - dot(&a, &b)).abs() < 1e-5, "dim {dim}");
        assert!((got - scalar::dot_f32(&a, &b)).abs() < 1e-5);
    }
}

#[test]
fn int8_dot_is_exact_at_the_accumulator_bound() {
    let a = vec![127i8; 4096];
    let b = vec![-127i8; 4096];
    assert_eq!(dot_i8(&a, &b), -4096 * 127 * 127);
    assert_eq!(dot_i8(&a, &a), scalar::dot_i8(&a, &a));
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(dot_fp32(&[1.0, 0.0], &[1.0]).is_err());
    let a = quantize(&[1.0, 0.0]).unwrap();
    let b = quantize(&[1.0]).unwrap();
    assert!(dot_int8(&a, &b).is_err());
    assert!(quantize(&[]).is_err());
    assert!(quantize(&[f32::NAN]).is_err());
}

proptest! {
    #[test]
    fn dispatched_int8_equals_scalar(pairs in proptest::collection::vec((-127i8..=127, -127i8..=127), 0..600)) {
        let (a, b): (Vec<i8>, Vec<i8>) = pairs.into_iter().unzip();
        let oracle: i64 = a.iter().zip(&b).map(|(x, y)| i64::from(*x) * i64::from(*y)).sum();
        prop_assert_eq!(i64::from(dot_i8(&a, &b)), oracle);
    }

    #[test]
    fn quantized_codes_stay_in_range(v in proptest::collection::vec(-1e6f32..1e6, 1..200)) {
        let q = quantize(&v).unwrap();
        prop_assert!(q.values().iter().all(|c| (-127..=127).contains(c)));
        prop_assert!(q.scale() > 0.0);
        let back = dequantize(&q);
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).abs() <= q.scale() * 0.5001);
        }
    }
}
