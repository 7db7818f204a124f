use aeon_bench::dataset::DenseForestSpec;
use aeon_bench::walk::{ConversationalWalk, Drift};
use proptest::prelude::*;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

#[test]
fn rows_cluster_more_tightly_than_across_clusters() {
    for (dim, spread) in [(768, 0.5), (64, 1.0), (16, 0.3)] {
        let spec = DenseForestSpec { n: 400, dim, clusters: 8, spread, seed: 5 };
        let d = spec.generate().unwrap();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0u64, 0.0, 0u64);
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                let s = dot(&d.rows[i], &d.rows[j]);
                if d.labels[i] == d.labels[j] {
                    intra += s;
                    ni += 1;
                } else {
                    inter += s;
                    nx += 1;
                }
            }
        }
        let (intra, inter) = (intra / ni as f64, inter / nx as f64);
        assert!(intra > inter + 0.1, "dim {dim}: intra {intra:.3} vs inter {inter:.3}");
        // Unit center plus a perturbation of norm about `spread`.
        let expected = 1.0 / (1.0 + f64::from(spread).powi(2));
        assert!((intra - expected).abs() < 0.1, "dim {dim}: intra {intra:.3}, expected about {expected:.3}");
    }
}

#[test]
fn gaussian_walk_steps_are_far_apart_at_high_dimension() {
    let steps = |drift| {
        let qs: Vec<Vec<f32>> = ConversationalWalk::new(768, drift, 3).take(2000).collect();
        let sims: Vec<f64> = qs.windows(2).map(|w| dot(&w[0], &w[1])).filter(|s| *s > 0.3).collect();
        sims.iter().sum::<f64>() / sims.len() as f64
    };
    // Drift steps only; jumps land near zero similarity and are filtered out.
    let g = steps(Drift::Gaussian);
    let u = steps(Drift::UnitStep);
    assert!((g - 1.0 / (1.0 + 0.0025f64 * 768.0).sqrt()).abs() < 0.02, "gaussian {g}");
    assert!((u - 1.0 / (1.0 + 0.0025f64).sqrt()).abs() < 0.002, "unit {u}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_normalized_labelled_and_seeded(
        n in 1usize..120,
        dim in 1usize..40,
        clusters in 1usize..10,
        spread in 0.0f32..2.0,
        seed in any::<u64>(),
    ) {
        let spec = DenseForestSpec { n, dim, clusters, spread, seed };
        let d = spec.generate().unwrap();
        prop_assert_eq!(d.len(), n);
        for (i, row) in d.rows.iter().enumerate() {
            prop_assert_eq!(row.len(), dim);
            prop_assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-4);
            prop_assert_eq!(d.labels[i] as usize, i % clusters);
        }
        prop_assert_eq!(&d, &spec.generate().unwrap());
    }
}
