use mast_core::rng;
use mast_core::sketch::{binomial, SketchDistribution, SketchSample};
use proptest::prelude::*;

fn enumerated_moments(dist: &SketchDistribution) -> (Vec<f64>, Vec<f64>, f64) {
    let d = dist.dim();
    let support = dist.enumerate_support(1 << 12).unwrap();
    let (mut m1, mut m2, mut total) = (vec![0.0; d], vec![0.0; d], 0.0);
    for (s, p) in &support {
        total += p;
        for (i, v) in s.diagonal().into_iter().enumerate() {
            m1[i] += p * v;
            m2[i] += p * v * v;
        }
    }
    (m1, m2, total)
}

#[test]
fn enumeration_is_exactly_unbiased_up_to_dim_eight() {
    let mut dists = vec![SketchDistribution::bernoulli(vec![0.2, 0.5, 0.9, 1.0, 0.35, 0.6, 0.75, 0.1]).unwrap()];
    for d in 1..=8 {
        for k in 1..=d {
            dists.push(SketchDistribution::rand_k(d, k).unwrap());
        }
        dists.push(SketchDistribution::bernoulli_uniform(d, 0.5).unwrap());
    }
    for dist in &dists {
        let (m1, m2, total) = enumerated_moments(dist);
        assert!((total - 1.0).abs() < 1e-12, "{dist:?}");
        let closed = dist.second_moment_diagonal();
        for i in 0..dist.dim() {
            assert!((m1[i] - 1.0).abs() < 1e-12, "{dist:?} coordinate {i}");
            assert!((m2[i] - closed[i]).abs() < 1e-12 * closed[i], "{dist:?} coordinate {i}");
        }
    }
}

#[test]
fn support_sizes_match_counts() {
    for d in 1..=8 {
        for k in 1..=d {
            let dist = SketchDistribution::rand_k(d, k).unwrap();
            assert_eq!(dist.enumerate_support(1000).unwrap().len() as u128, binomial(d as u128, k as u128));
        }
    }
    let b = SketchDistribution::bernoulli(vec![0.5, 1.0, 0.25]).unwrap();
    assert_eq!(b.support_size(), 4);
    assert_eq!(b.enumerate_support(10).unwrap().len(), 4);
}

#[test]
fn finite_set_of_rand_k_support_has_rand_k_constants() {
    let rk = SketchDistribution::rand_k(5, 2).unwrap();
    let members: Vec<SketchSample> = rk.enumerate_support(100).unwrap().into_iter().map(|(s, _)| s).collect();
    let fs = SketchDistribution::finite_set(members).unwrap();
    let (a, b) = (rk.spectral_constants(), fs.spectral_constants());
    assert!((a.l_d - b.l_d).abs() < 1e-12 && (a.mu_d - b.mu_d).abs() < 1e-12 && (a.l_s_max - b.l_s_max).abs() < 1e-12);
}

#[test]
fn sampling_frequencies_match_enumeration() {
    let dist = SketchDistribution::rand_k(5, 2).unwrap();
    let mut r = rng::derive(99, &[]);
    let n = 50_000;
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..n {
        let s = dist.sample(&mut r);
        let key: Vec<usize> = s.entries().iter().map(|e| e.0).collect();
        *counts.entry(key).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 10);
    // each subset has probability 1/10; 5 sigma of a binomial count
    let sigma = (n as f64 * 0.1 * 0.9).sqrt();
    for c in counts.values() {
        assert!((*c as f64 - n as f64 * 0.1).abs() < 5.0 * sigma);
    }
}

proptest! {
    #[test]
    fn bernoulli_constants_follow_extreme_probabilities(probs in proptest::collection::vec(0.05f64..=1.0, 1..7)) {
        let dist = SketchDistribution::bernoulli(probs.clone()).unwrap();
        let c = dist.spectral_constants();
        let pmin = probs.iter().cloned().fold(f64::INFINITY, f64::min);
        let pmax = probs.iter().cloned().fold(0.0, f64::max);
        prop_assert!((c.l_d - 1.0 / pmin).abs() < 1e-12 * c.l_d);
        prop_assert!((c.mu_d - 1.0 / pmax).abs() < 1e-12 * c.mu_d);
        prop_assert!((c.l_s_max - 1.0 / (pmin * pmin)).abs() < 1e-12 * c.l_s_max);
        prop_assert!(c.mu_d <= c.l_d && c.l_d <= c.l_s_max);
        let (m1, m2, _) = enumerated_moments(&dist);
        for i in 0..probs.len() {
            prop_assert!((m1[i] - 1.0).abs() < 1e-12);
            prop_assert!((m2[i] - 1.0 / probs[i]).abs() < 1e-12 * m2[i]);
        }
    }

    #[test]
    fn rand_k_samples_have_k_entries(d in 1usize..40, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 1 + ((d - 1) as f64 * frac) as usize;
        let dist = SketchDistribution::rand_k(d, k).unwrap();
        let s = dist.sample(&mut rng::derive(seed, &[]));
        prop_assert_eq!(s.nnz(), k);
        prop_assert!(s.entries().windows(2).all(|w| w[0].0 < w[1].0));
        prop_assert!(s.entries().iter().all(|e| (e.1 - d as f64 / k as f64).abs() < 1e-12));
    }
}
