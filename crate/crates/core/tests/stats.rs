use ndarray::Array1;
use preimage_core::sampler::rng_from_seed;
use preimage_core::stats::{
    aggregate, bootstrap_fractions, percentile_interval, split_fractions, weighted_fraction, LeafEstimate,
};
use proptest::prelude::*;
use rand::Rng;

fn coin_flips(n: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.random::<f64>() < p).collect()
}

#[test]
fn bernoulli_interval_width_matches_normal_theory() {
    let n = 2000;
    let mask = coin_flips(n, 0.5, 0);
    let w = Array1::ones(n);
    let reps = bootstrap_fractions(w.view(), &[&mask], 1000, &mut rng_from_seed(1)).remove(0);
    let ci = percentile_interval(reps.as_slice().unwrap(), 0.9);
    let expected = 2.0 * 1.645 * (0.25f64 / n as f64).sqrt();
    assert!((ci.width() - expected).abs() <= 0.2 * expected, "width {} vs {expected}", ci.width());
}

#[test]
fn interval_centres_on_the_point_estimate() {
    let n = 2000;
    let mask = coin_flips(n, 0.3, 2);
    let w = Array1::ones(n);
    let p = weighted_fraction(w.view(), &mask).unwrap();
    let reps = bootstrap_fractions(w.view(), &[&mask], 10_000, &mut rng_from_seed(3)).remove(0);
    let ci = percentile_interval(reps.as_slice().unwrap(), 0.9);
    assert!(ci.contains(p));
    let mid = 0.5 * (ci.low + ci.high);
    // the bootstrap mean of a proportion is the proportion; with 10^4
    // replicates the midpoint sits within a few standard errors of it
    let se = (p * (1.0 - p) / n as f64).sqrt() / (10_000f64).sqrt();
    assert!((mid - p).abs() < 0.002 + 5.0 * se, "midpoint {mid} vs {p}");
    let mean = reps.mean().unwrap();
    assert!((mean - p).abs() < 5.0 * se);
}

#[test]
fn weighted_interval_uses_weights() {
    // half the weight sits on the hits
    let mask: Vec<bool> = (0..1000).map(|j| j < 100).collect();
    let w = Array1::from_shape_fn(1000, |j| if j < 100 { 9.0 } else { 1.0 });
    assert!((weighted_fraction(w.view(), &mask).unwrap() - 0.5).abs() < 1e-12);
    let reps = bootstrap_fractions(w.view(), &[&mask], 2000, &mut rng_from_seed(4)).remove(0);
    let ci = percentile_interval(reps.as_slice().unwrap(), 0.9);
    assert!(ci.contains(0.5));
}

fn leaf_with_reps(volume: f64, p: f64, o: f64, reps: usize, seed: u64) -> LeafEstimate {
    let mut rng = rng_from_seed(seed);
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, v: f64| Array1::from_shape_fn(reps, |_| (v + 0.02 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
    LeafEstimate {
        volume,
        frac_p: p,
        frac_o: o,
        volume_reps: Array1::from_elem(reps, volume),
        frac_p_reps: jitter(&mut rng, p),
        frac_o_reps: jitter(&mut rng, o),
    }
}

#[test]
fn aggregate_is_additive_over_leaves() {
    let leaves: Vec<LeafEstimate> = (0..5)
        .map(|k| leaf_with_reps(0.1 * (k + 1) as f64, 0.2 + 0.1 * k as f64, 0.5, 300, k))
        .collect();
    let all = aggregate(&leaves, 0.9);
    let (a, b) = leaves.split_at(2);
    let left = aggregate(a, 0.9);
    let right = aggregate(b, 0.9);
    assert!((all.v_p - left.v_p - right.v_p).abs() < 1e-12);
    assert!((all.v_o - left.v_o - right.v_o).abs() < 1e-12);
    assert!((all.ratio - all.v_p / all.v_o).abs() < 1e-12);
    let ci = all.ci_ratio.unwrap();
    assert!(ci.low <= ci.high);
    let ci_p = all.ci_p.unwrap();
    assert!(ci_p.contains(all.v_p));
}

proptest! {
    #[test]
    fn sibling_fractions_sum_to_one(
        w in prop::collection::vec(0.1f64..5.0, 2..200),
        bits in prop::collection::vec(any::<bool>(), 200),
        seed in 0u64..1000,
    ) {
        let n = w.len();
        let w = Array1::from(w);
        let neg = &bits[..n];
        let (a, b) = split_fractions(w.view(), neg, 100, &mut rng_from_seed(seed));
        for k in 0..100 {
            prop_assert!((a[k] + b[k] - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a[k]));
        }
    }

    #[test]
    fn percentile_interval_is_ordered_and_inside_the_range(
        v in prop::collection::vec(-100.0f64..100.0, 1..300),
        level in 0.05f64..0.99,
    ) {
        let ci = percentile_interval(&v, level);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(ci.low <= ci.high);
        prop_assert!(ci.low >= min && ci.high <= max);
    }

    #[test]
    fn wider_level_gives_wider_interval(v in prop::collection::vec(-10.0f64..10.0, 2..200)) {
        let a = percentile_interval(&v, 0.5);
        let b = percentile_interval(&v, 0.9);
        prop_assert!(b.low <= a.low && a.high <= b.high);
    }
}
