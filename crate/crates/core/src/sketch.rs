//! Random diagonal sketches.
//!
//! A sketch `S = diag(c_1, ..., c_d)` acts coordinatewise on model weights and
//! gradients. Distributions here all satisfy `E[S] = I`; their spectral
//! constants (`L_D`, `mu_D`, `L_S^max`) drive every step-size rule.

use rand::Rng;

use crate::error::{check_dim, Error, Result};

/// Default cap on enumerated support size.
pub const DEFAULT_SUPPORT_LIMIT: u128 = 10_000;

const UNBIASED_TOL: f64 = 1e-9;

/// One realized diagonal sketch. Coordinates not listed have scale zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchSample {
    dim: usize,
    // sorted by coordinate, scales finite and > 0
    entries: Vec<(usize, f64)>,
}

impl SketchSample {
    pub fn identity(dim: usize) -> Self {
        Self { dim, entries: (0..dim).map(|i| (i, 1.0)).collect() }
    }

    /// Builds from `(coordinate, scale)` pairs. Zero scales are dropped;
    /// duplicate or out-of-range coordinates and negative or non-finite scales
    /// are rejected.
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut entries: Vec<(usize, f64)> = entries.into_iter().filter(|e| e.1 != 0.0).collect();
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidDistribution(format!("duplicate coordinate {}", w[0].0)));
            }
        }
        for &(i, c) in &entries {
            if i >= dim {
                return Err(Error::InvalidDistribution(format!("coordinate {i} outside dimension {dim}")));
            }
            if !c.is_finite() || c < 0.0 {
                return Err(Error::InvalidDistribution(format!("scale {c} at coordinate {i}")));
            }
        }
        Ok(Self { dim, entries })
    }

    /// Builds from a full diagonal.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::from_entries(diag.len(), diag.iter().copied().enumerate())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for &(i, c) in &self.entries {
            d[i] = c;
        }
        d
    }

    /// `S v`
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        let mut out = vec![0.0; self.dim];
        for &(i, c) in &self.entries {
            out[i] = c * v[i];
        }
        Ok(out)
    }

    /// `S^T v`. Same as [`apply`](Self::apply) while only diagonal sketches exist.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply(v)
    }

    /// `lambda_max(S^T S)`
    pub fn lambda_max(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).fold(0.0, f64::max)
    }

    /// `lambda_min(S^T S)`; zero whenever a coordinate is dropped.
    pub fn lambda_min(&self) -> f64 {
        if self.entries.len() < self.dim {
            0.0
        } else {
            self.entries.iter().map(|e| e.1 * e.1).fold(f64::INFINITY, f64::min)
        }
    }

    fn support_key(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

/// `L_D`, `mu_D` and `L_S^max` of a sketch distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralConstants {
    pub l_d: f64,
    pub mu_d: f64,
    pub l_s_max: f64,
}

impl SpectralConstants {
    pub const IDENTITY: Self = Self { l_d: 1.0, mu_d: 1.0, l_s_max: 1.0 };

    pub fn kappa(&self) -> f64 {
        self.l_d / self.mu_d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SketchDistribution {
    Identity { dim: usize },
    /// Independent `c_i = 1/p_i` with probability `p_i`, else 0.
    Bernoulli { probs: Vec<f64> },
    /// Uniform `K`-subset of coordinates, each scaled by `d/K`.
    RandK { dim: usize, k: usize },
    /// Uniform over a fixed list of sketches.
    FiniteSet { members: Vec<SketchSample> },
}

impl SketchDistribution {
    pub fn identity(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDistribution("dimension must be positive".into()));
        }
        Ok(Self::Identity { dim })
    }

    pub fn bernoulli(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("dimension must be positive".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::InvalidDistribution(format!("probability {p} outside (0, 1]")));
        }
        Ok(Self::Bernoulli { probs })
    }

    pub fn bernoulli_uniform(dim: usize, p: f64) -> Result<Self> {
        Self::bernoulli(vec![p; dim])
    }

    pub fn rand_k(dim: usize, k: usize) -> Result<Self> {
        if dim == 0 || k == 0 || k > dim {
            return Err(Error::InvalidDistribution(format!("rand-k needs 1 <= K <= d, got K={k}, d={dim}")));
        }
        Ok(Self::RandK { dim, k })
    }

    /// Uniform distribution over `members`. The members must share a dimension
    /// and average to the identity.
    pub fn finite_set(members: Vec<SketchSample>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidDistribution("finite set is empty".into()))?;
        let dim = first.dim;
        if let Some(m) = members.iter().find(|m| m.dim != dim) {
            return Err(Error::InvalidDistribution(format!("member of dimension {} in a set of dimension {dim}", m.dim)));
        }
        let mut mean = vec![0.0; dim];
        for m in &members {
            for &(i, c) in &m.entries {
                mean[i] += c;
            }
        }
        let n = members.len() as f64;
        if let Some((i, m)) = mean.iter().enumerate().find(|(_, m)| (**m / n - 1.0).abs() > UNBIASED_TOL) {
            return Err(Error::InvalidDistribution(format!("E[S] has {} at coordinate {i}, expected 1", m / n)));
        }
        Ok(Self::FiniteSet { members })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Identity { dim } | Self::RandK { dim, .. } => *dim,
            Self::Bernoulli { probs } => probs.len(),
            Self::FiniteSet { members } => members[0].dim,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SketchSample {
        match self {
            Self::Identity { dim } => SketchSample::identity(*dim),
            Self::Bernoulli { probs } => {
                let entries = probs
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p >= 1.0 || rng.gen::<f64>() < p)
                    .map(|(i, &p)| (i, 1.0 / p))
                    .collect();
                SketchSample { dim: probs.len(), entries }
            }
            Self::RandK { dim, k } => {
                // partial Fisher-Yates
                let mut idx: Vec<usize> = (0..*dim).collect();
                for i in 0..*k {
                    let j = rng.gen_range(i..*dim);
                    idx.swap(i, j);
                }
                let mut chosen = idx[..*k].to_vec();
                chosen.sort_unstable();
                let scale = *dim as f64 / *k as f64;
                SketchSample { dim: *dim, entries: chosen.into_iter().map(|i| (i, scale)).collect() }
            }
            Self::FiniteSet { members } => members[rng.gen_range(0..members.len())].clone(),
        }
    }

    /// Diagonal of `E[S^T S]`.
    pub fn second_moment_diagonal(&self) -> Vec<f64> {
        match self {
            Self::Identity { dim } => vec![1.0; *dim],
            Self::Bernoulli { probs } => probs.iter().map(|p| 1.0 / p).collect(),
            Self::RandK { dim, k } => vec![*dim as f64 / *k as f64; *dim],
            Self::FiniteSet { members } => {
                let mut acc = vec![0.0; members[0].dim];
                for m in members {
                    for &(i, c) in &m.entries {
                        acc[i] += c * c;
                    }
                }
                let n = members.len() as f64;
                acc.into_iter().map(|v| v / n).collect()
            }
        }
    }

    /// Per-coordinate variance of the diagonal entries.
    pub fn diagonal_variance(&self) -> Vec<f64> {
        self.second_moment_diagonal().into_iter().map(|m| m - 1.0).collect()
    }

    pub fn spectral_constants(&self) -> SpectralConstants {
        match self {
            Self::Identity { .. } => SpectralConstants::IDENTITY,
            Self::Bernoulli { probs } => {
                let p_min = probs.iter().copied().fold(f64::INFINITY, f64::min);
                let p_max = probs.iter().copied().fold(0.0, f64::max);
                SpectralConstants { l_d: 1.0 / p_min, mu_d: 1.0 / p_max, l_s_max: 1.0 / (p_min * p_min) }
            }
            Self::RandK { dim, k } => {
                let r = *dim as f64 / *k as f64;
                SpectralConstants { l_d: r, mu_d: r, l_s_max: r * r }
            }
            Self::FiniteSet { members } => {
                let m = self.second_moment_diagonal();
                SpectralConstants {
                    l_d: m.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mu_d: m.iter().copied().fold(f64::INFINITY, f64::min),
                    l_s_max: members.iter().map(SketchSample::lambda_max).fold(0.0, f64::max),
                }
            }
        }
    }

    /// Number of distinct outcomes with positive probability (saturating).
    pub fn support_size(&self) -> u128 {
        match self {
            Self::Identity { .. } => 1,
            Self::Bernoulli { probs } => {
                let free = probs.iter().filter(|p| **p < 1.0).count() as u32;
                1u128.checked_shl(free).filter(|_| free < 128).unwrap_or(u128::MAX)
            }
            Self::RandK { dim, k } => binomial(*dim as u128, *k as u128),
            Self::FiniteSet { members } => members.len() as u128,
        }
    }

    /// Whether every support member carries the same probability.
    pub fn is_uniform(&self) -> bool {
        match self {
            Self::Bernoulli { probs } => probs.iter().all(|p| *p == 0.5 || *p == 1.0),
            _ => true,
        }
    }

    /// Full support with probabilities. Rand-K and Bernoulli outcomes are
    /// ordered lexicographically by their index sets; a finite set keeps its
    /// own order.
    pub fn enumerate_support(&self, limit: u128) -> Result<Vec<(SketchSample, f64)>> {
        let count = self.support_size();
        if count > limit {
            return Err(Error::SupportTooLarge { count, limit });
        }
        let d = self.dim();
        Ok(match self {
            Self::Identity { dim } => vec![(SketchSample::identity(*dim), 1.0)],
            Self::RandK { dim, k } => {
                let scale = *dim as f64 / *k as f64;
                let prob = 1.0 / count as f64;
                combinations(*dim, *k)
                    .into_iter()
                    .map(|c| (SketchSample { dim: d, entries: c.into_iter().map(|i| (i, scale)).collect() }, prob))
                    .collect()
            }
            Self::Bernoulli { probs } => {
                let free: Vec<usize> = (0..d).filter(|&i| probs[i] < 1.0).collect();
                let mut out = Vec::with_capacity(count as usize);
                for mask in 0u64..(1u64 << free.len()) {
                    let mut prob = 1.0;
                    let mut entries = Vec::new();
                    let mut fi = 0;
                    for (i, &p) in probs.iter().enumerate() {
                        if p >= 1.0 {
                            entries.push((i, 1.0));
                        } else {
                            if mask >> fi & 1 == 1 {
                                prob *= p;
                                entries.push((i, 1.0 / p));
                            } else {
                                prob *= 1.0 - p;
                            }
                            fi += 1;
                        }
                    }
                    out.push((SketchSample { dim: d, entries }, prob));
                }
                out.sort_by_key(|a| a.0.support_key());
                out
            }
            Self::FiniteSet { members } => {
                let prob = 1.0 / members.len() as f64;
                members.iter().cloned().map(|m| (m, prob)).collect()
            }
        })
    }
}

/// Exact binomial coefficient, saturating at `u128::MAX`.
pub fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let mut i = k;
        while i > 0 && cur[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn sample_identity() {
        let s = SketchDistribution::identity(3).unwrap().sample(&mut rng::derive(0, &[]));
        assert_eq!(s.diagonal(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn sample_rand_k_scales() {
        let dist = SketchDistribution::rand_k(4, 2).unwrap();
        for seed in 0..20 {
            let s = dist.sample(&mut rng::derive(seed, &[]));
            assert_eq!(s.nnz(), 2);
            assert!(s.entries().iter().all(|e| e.1 == 2.0));
        }
    }

    #[test]
    fn sample_bernoulli_deterministic_coordinates() {
        let dist = SketchDistribution::bernoulli(vec![1.0, 1.0]).unwrap();
        let s = dist.sample(&mut rng::derive(3, &[]));
        assert_eq!(s.diagonal(), vec![1.0, 1.0]);
    }

    #[test]
    fn apply_examples() {
        let s = SketchSample::from_diagonal(&[2.0, 0.0]).unwrap();
        assert_eq!(s.apply(&[3.0, 5.0]).unwrap(), vec![6.0, 0.0]);
        assert_eq!(s.apply_transpose(&[3.0, 5.0]).unwrap(), vec![6.0, 0.0]);
        let id = SketchSample::identity(3);
        assert_eq!(id.apply(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        let rk = SketchSample::from_entries(4, [(0, 2.0), (3, 2.0)]).unwrap();
        assert_eq!(rk.apply(&[1.0; 4]).unwrap(), vec![2.0, 0.0, 0.0, 2.0]);
        assert_eq!(rk.apply_transpose(&[1.0; 4]).unwrap(), vec![2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn apply_dimension_mismatch() {
        let s = SketchSample::identity(3);
        assert_eq!(s.apply(&[1.0]), Err(Error::DimensionMismatch { expected: 3, got: 1 }));
    }

    #[test]
    fn invalid_samples_rejected() {
        assert!(SketchSample::from_entries(2, [(0, 1.0), (0, 2.0)]).is_err());
        assert!(SketchSample::from_entries(2, [(2, 1.0)]).is_err());
        assert!(SketchSample::from_entries(2, [(0, f64::NAN)]).is_err());
        assert!(SketchSample::from_entries(2, [(0, -1.0)]).is_err());
    }

    #[test]
    fn spectral_constant_examples() {
        let rk = SketchDistribution::rand_k(4, 2).unwrap().spectral_constants();
        assert_eq!((rk.l_d, rk.mu_d, rk.l_s_max), (2.0, 2.0, 4.0));
        let b = SketchDistribution::bernoulli(vec![0.5, 0.25]).unwrap().spectral_constants();
        assert_eq!((b.l_d, b.mu_d, b.l_s_max), (4.0, 2.0, 16.0));
        assert_eq!(SketchDistribution::identity(5).unwrap().spectral_constants(), SpectralConstants::IDENTITY);
    }

    #[test]
    fn zero_probability_rejected() {
        assert!(SketchDistribution::bernoulli(vec![0.5, 0.0]).is_err());
        assert!(SketchDistribution::bernoulli(vec![1.5]).is_err());
        assert!(SketchDistribution::rand_k(3, 0).is_err());
        assert!(SketchDistribution::rand_k(3, 4).is_err());
    }

    #[test]
    fn finite_set_validation() {
        let a = SketchSample::from_diagonal(&[2.0, 0.0]).unwrap();
        let b = SketchSample::from_diagonal(&[0.0, 2.0]).unwrap();
        assert!(SketchDistribution::finite_set(vec![a.clone(), b.clone()]).is_ok());
        assert!(SketchDistribution::finite_set(vec![a.clone()]).is_err());
        assert!(SketchDistribution::finite_set(vec![a, SketchSample::identity(3)]).is_err());
        assert!(SketchDistribution::finite_set(vec![]).is_err());
    }

    #[test]
    fn enumerate_rand_k_singletons() {
        let sup = SketchDistribution::rand_k(3, 1).unwrap().enumerate_support(DEFAULT_SUPPORT_LIMIT).unwrap();
        assert_eq!(sup.len(), 3);
        for (i, (s, p)) in sup.iter().enumerate() {
            assert_eq!(s.entries(), &[(i, 3.0)]);
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn enumerate_finite_set_keeps_order() {
        let a = SketchSample::from_diagonal(&[2.0, 0.0]).unwrap();
        let b = SketchSample::from_diagonal(&[0.0, 2.0]).unwrap();
        let sup = SketchDistribution::finite_set(vec![a.clone(), b.clone()]).unwrap().enumerate_support(10).unwrap();
        assert_eq!(sup, vec![(a, 0.5), (b, 0.5)]);
    }

    #[test]
    fn enumerate_too_large() {
        let err = SketchDistribution::rand_k(30, 15).unwrap().enumerate_support(10_000).unwrap_err();
        assert_eq!(err, Error::SupportTooLarge { count: 155_117_520, limit: 10_000 });
    }

    #[test]
    fn bernoulli_support_skips_certain_coordinates() {
        let dist = SketchDistribution::bernoulli(vec![1.0, 0.5, 0.25]).unwrap();
        assert_eq!(dist.support_size(), 4);
        let sup = dist.enumerate_support(100).unwrap();
        assert_eq!(sup.len(), 4);
        assert!(sup.iter().all(|(s, _)| s.entries()[0] == (0, 1.0)));
        let keys: Vec<Vec<usize>> = sup.iter().map(|(s, _)| s.support_key()).collect();
        assert_eq!(keys, vec![vec![0], vec![0, 1], vec![0, 1, 2], vec![0, 2]]);
        assert!((sup.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(30, 15), 155_117_520);
        assert_eq!(binomial(6, 2), 15);
        assert_eq!(binomial(123, 1), 123);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(1000, 500), u128::MAX);
    }

    #[test]
    fn combinations_lexicographic() {
        assert_eq!(combinations(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(combinations(2, 2), vec![vec![0, 1]]);
    }
}
