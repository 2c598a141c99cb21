//! Datasets shipped with the binary and small problems for the checks.

use std::sync::Arc;

use mast_core::data::{self, Dataset, SyntheticSpec};
use mast_core::linalg::CsrMatrix;
use mast_core::objective::{LogisticLoss, NonconvexLogisticLoss, QuadraticLoss};
use mast_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;

/// Names accepted by `data.fixture`.
pub const DATASETS: &[&str] = &["synthetic"];

/// 3000 rows, 100 binary features, 20% positives. Regenerate with
/// [`synthetic_spec`].
pub const SYNTHETIC_LIBSVM: &str = include_str!("../fixtures/synthetic.libsvm");

pub fn synthetic_spec() -> SyntheticSpec {
    SyntheticSpec { n: 3000, d: 100, density: 0.1, noise: 0.5, positive_fraction: 0.2, seed: 7 }
}

pub fn dataset(name: &str) -> mast_core::Result<Dataset> {
    match name {
        "synthetic" => data::parse_libsvm(SYNTHETIC_LIBSVM),
        _ => Err(mast_core::Error::Config(format!("unknown fixture {name:?}"))),
    }
}

/// Gaussian features with about 60% density and labels from a noisy planted
/// direction.
pub fn toy_data(d: usize, n: usize, seed: u64) -> (CsrMatrix, Vec<f64>) {
    let mut r = rng::derive(seed, &[rng::tag::FIXTURE]);
    let w: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<(usize, f64)> = (0..d)
            .filter_map(|j| {
                let v: f64 = r.sample(StandardNormal);
                (r.gen::<f64>() < 0.6).then_some((j, v))
            })
            .collect();
        let score: f64 = row.iter().map(|&(j, v)| w[j] * v).sum::<f64>() + r.sample::<f64, _>(StandardNormal);
        labels.push(if score >= 0.0 { 1.0 } else { -1.0 });
        rows.push(row);
    }
    (CsrMatrix::from_rows(d, &rows), labels)
}

pub fn toy_logistic(d: usize, n: usize, lambda: f64, seed: u64) -> Arc<LogisticLoss> {
    let (a, b) = toy_data(d, n, seed);
    Arc::new(LogisticLoss::new(a, b, lambda).expect("valid toy data"))
}

/// Nonconvex logistic loss with the trivial infimum 0.
pub fn toy_nonconvex(d: usize, n: usize, lambda: f64, seed: u64) -> Arc<NonconvexLogisticLoss> {
    let (a, b) = toy_data(d, n, seed);
    Arc::new(NonconvexLogisticLoss::new(a, b, lambda).expect("valid toy data").with_lower_bound(0.0))
}

/// Dense quadratic `M = B B^T / d + 0.5 I` with a Gaussian center.
pub fn toy_quadratic(d: usize, seed: u64) -> Arc<QuadraticLoss> {
    let mut r = rng::derive(seed, &[rng::tag::FIXTURE]);
    let b: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| r.sample(StandardNormal)).collect()).collect();
    let m: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let g: f64 = (0..d).map(|k| b[i][k] * b[j][k]).sum::<f64>() / d as f64;
                    g + if i == j { 0.5 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let center = (0..d).map(|_| r.sample(StandardNormal)).collect();
    Arc::new(QuadraticLoss::dense(m, center, 0.0).expect("symmetric positive definite"))
}

/// Gaussian vector of length `d` from the fixture stream `(seed, FIXTURE, tag)`.
pub fn gaussian(d: usize, seed: u64, tag: u64) -> Vec<f64> {
    let mut r = rng::derive(seed, &[rng::tag::FIXTURE, tag]);
    (0..d).map(|_| r.sample(StandardNormal)).collect()
}
