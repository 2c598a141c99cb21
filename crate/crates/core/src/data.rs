//! LibSVM datasets, seeded splits and a synthetic generator.
//!
//! Labels are normalized to `{-1, +1}`; a file using `{0, 1}` is mapped
//! `0 -> -1`. Feature indices are 1-based in text and 0-based in memory.
//! `content_hash` is FNV-1a 64 over the canonical text from [`Dataset::to_libsvm`].

use std::hash::Hasher;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_dim, Error, Result};
use crate::linalg::CsrMatrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: CsrMatrix,
    labels: Vec<f64>,
    content_hash: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Dataset {
    /// Labels must be `+-1`.
    pub fn new(features: CsrMatrix, labels: Vec<f64>) -> Result<Self> {
        check_dim(features.n_rows(), labels.len())?;
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(i) = labels.iter().position(|&b| b != 1.0 && b != -1.0) {
            return Err(Error::Parse { line: i + 1, msg: format!("label {} is not +-1", labels[i]) });
        }
        let mut ds = Self { features, labels, content_hash: 0 };
        ds.content_hash = fnv1a(ds.to_libsvm().as_bytes());
        Ok(ds)
    }

    pub fn features(&self) -> &CsrMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.features.n_cols()
    }

    pub fn content_hash(&self) -> u64 {
        self.content_hash
    }

    /// One sample per line, `+1`/`-1` then `index:value` with 1-based indices.
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n() {
            out.push_str(if self.labels[i] > 0.0 { "+1" } else { "-1" });
            let (idx, val) = self.features.row(i);
            for (j, v) in idx.iter().zip(val) {
                out.push_str(&format!(" {}:{}", j + 1, v));
            }
            out.push('\n');
        }
        out
    }

    /// Rows `idx`, keeping the column count.
    pub fn subset(&self, idx: &[usize]) -> Result<(CsrMatrix, Vec<f64>)> {
        if idx.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(Error::Config(format!("row {bad} out of range for {} rows", self.n())));
        }
        Ok((self.features.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Appends a constant-1 feature as the last column.
    pub fn with_intercept(&self) -> Self {
        let d = self.d();
        let rows: Vec<Vec<(usize, f64)>> = (0..self.n())
            .map(|i| {
                let (c, v) = self.features.row(i);
                let mut r: Vec<(usize, f64)> = c.iter().copied().zip(v.iter().copied()).collect();
                r.push((d, 1.0));
                r
            })
            .collect();
        Self::new(CsrMatrix::from_rows(d + 1, &rows), self.labels.clone()).expect("labels already validated")
    }
}

fn parse_label(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse { line, msg: format!("bad label {tok:?}") })?;
    if v == 1.0 || v == -1.0 || v == 0.0 {
        Ok(v)
    } else {
        Err(Error::Parse { line, msg: format!("label {tok:?} is not one of -1, 0, +1") })
    }
}

/// Parses LibSVM text. Blank lines are skipped.
pub fn parse_libsvm(text: &str) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut d = 0usize;
    let (mut saw_zero, mut saw_neg) = (None, None);
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let mut toks = raw.split_whitespace();
        let Some(first) = toks.next() else { continue };
        let label = parse_label(first, line)?;
        if label == 0.0 {
            saw_zero.get_or_insert(line);
        } else if label == -1.0 {
            saw_neg.get_or_insert(line);
        }
        if let (Some(a), Some(b)) = (saw_zero, saw_neg) {
            return Err(Error::Parse { line: a.max(b), msg: "labels mix 0 and -1".into() });
        }
        let mut row: Vec<(usize, f64)> = Vec::new();
        for tok in toks {
            let (i, v) = tok.split_once(':').ok_or_else(|| Error::Parse { line, msg: format!("expected index:value, got {tok:?}") })?;
            let i: usize = i.parse().map_err(|_| Error::Parse { line, msg: format!("bad index {i:?}") })?;
            let v: f64 = v.parse().map_err(|_| Error::Parse { line, msg: format!("bad value {v:?}") })?;
            if i == 0 {
                return Err(Error::Parse { line, msg: "feature indices start at 1".into() });
            }
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("non-finite value {v}") });
            }
            if row.last().is_some_and(|&(j, _)| j >= i - 1) {
                return Err(Error::Parse { line, msg: format!("index {i} is not increasing") });
            }
            d = d.max(i);
            row.push((i - 1, v));
        }
        rows.push(row);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = labels.into_iter().map(|b| if b == 0.0 { -1.0 } else { b }).collect();
    Dataset::new(CsrMatrix::from_rows(d, &rows), labels)
}

/// Index lists for consecutive slices of a seeded permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub parts: Vec<Vec<usize>>,
    pub seed: u64,
}

impl Split {
    pub fn train(&self) -> &[usize] {
        &self.parts[0]
    }

    /// The middle part of a three-way split.
    pub fn validation(&self) -> Option<&[usize]> {
        (self.parts.len() == 3).then(|| &self.parts[1][..])
    }

    pub fn test(&self) -> &[usize] {
        self.parts.last().expect("split has parts")
    }
}

/// Shuffles rows with a stream keyed by `(seed, content_hash)` and slices at
/// `round(n * cumulative fraction)`.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(sum));
    }
    let n = ds.n();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::derive(seed, &[rng::tag::SPLIT, ds.content_hash()]));
    let mut parts = Vec::with_capacity(fractions.len());
    let (mut cum, mut start) = (0.0, 0usize);
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() { n } else { ((n as f64 * cum).round() as usize).min(n) };
        parts.push(perm[start..end].to_vec());
        start = end;
    }
    Ok(Split { parts, seed })
}

/// Fraction of rows in `idx` with `b_i a_i^T x > 0`. A zero margin counts as
/// a mistake.
pub fn accuracy(ds: &Dataset, idx: &[usize], x: &[f64]) -> Result<f64> {
    check_dim(ds.d(), x.len())?;
    if idx.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut hits = 0usize;
    for &i in idx {
        if i >= ds.n() {
            return Err(Error::Config(format!("row {i} out of range for {} rows", ds.n())));
        }
        if ds.labels[i] * ds.features.row_dot(i, x) > 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len() as f64)
}

/// Parameters of [`synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    /// Probability that a given binary feature is active in a row.
    pub density: f64,
    /// Standard deviation of the logit noise.
    pub noise: f64,
    /// Share of rows labelled `+1`.
    pub positive_fraction: f64,
    pub seed: u64,
}

/// Binary sparse features scored by `a^T w + noise` for a planted Gaussian
/// `w`; the top `positive_fraction` of scores are labelled `+1`.
pub fn synthetic(spec: SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0
        || spec.d == 0
        || !(spec.density > 0.0 && spec.density <= 1.0)
        || !(spec.noise >= 0.0)
        || !(spec.positive_fraction > 0.0 && spec.positive_fraction < 1.0)
    {
        return Err(Error::Config(format!("invalid synthetic spec {spec:?}")));
    }
    let mut r = rng::derive(spec.seed, &[rng::tag::FIXTURE]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let w: Vec<f64> = (0..spec.d).map(|_| normal.sample(&mut r)).collect();
    let mut rows = Vec::with_capacity(spec.n);
    let mut scores = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let row: Vec<(usize, f64)> = (0..spec.d).filter(|_| r.gen::<f64>() < spec.density).map(|j| (j, 1.0)).collect();
        scores.push(row.iter().map(|&(j, v)| v * w[j]).sum::<f64>() + spec.noise * normal.sample(&mut r));
        rows.push(row);
    }
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let n_pos = ((spec.n as f64 * spec.positive_fraction).round() as usize).clamp(1, spec.n.saturating_sub(1).max(1));
    let mut labels = vec![-1.0; spec.n];
    for &i in &order[..n_pos] {
        labels[i] = 1.0;
    }
    Dataset::new(CsrMatrix::from_rows(spec.d, &rows), labels)
}
