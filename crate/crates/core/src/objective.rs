//! Losses, the sketched objective and its gradient estimators.
//!
//! For a loss `f`, a sketch distribution `D` and a shift `s`, the sketched
//! objective is `f~(x) = E_S[f_S(x)]` with `f_S(x) = f(s + S(x - s))`, and the
//! per-sketch gradient is `grad f_S(x) = S^T grad f(s + S(x - s))`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, CsrMatrix};
use crate::sketch::{SketchDistribution, SketchSample, SpectralConstants};

/// Power-iteration settings for `lambda_max(A^T A)`.
pub const POWER_ITER_TOL: f64 = 1e-8;
pub const POWER_ITER_MAX: usize = 10_000;

/// A differentiable objective with known regularity constants.
///
/// `value` and `gradient` assume `x.len() == dim()`; [`MastProblem`] checks
/// dimensions before calling them.
pub trait Loss: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// `L_f`
    fn smoothness(&self) -> f64;
    /// `mu_f`; zero when not strongly convex.
    fn strong_convexity(&self) -> f64;
    fn is_convex(&self) -> bool;
    /// `f^inf`, when known.
    fn lower_bound(&self) -> Option<f64>;
    fn finite_sum(&self) -> Option<&dyn FiniteSum> {
        None
    }
}

/// `f = (1/n) sum_i f_i`
pub trait FiniteSum: Send + Sync {
    fn n_terms(&self) -> usize;
    fn term_value(&self, i: usize, x: &[f64]) -> f64;
    /// `out += weight * grad f_i(x)`
    fn add_term_gradient(&self, i: usize, x: &[f64], weight: f64, out: &mut [f64]);
    /// `L_{f_i}`
    fn term_smoothness(&self, i: usize) -> f64;
    /// A lower bound on `inf f_i`. Exact for the l2-regularized logistic loss.
    fn term_lower_bound(&self, i: usize) -> Option<f64>;
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_labels(features: &CsrMatrix, labels: &[f64]) -> Result<()> {
    check_dim(features.n_rows(), labels.len())?;
    if features.n_rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(b) = labels.iter().find(|b| **b != 1.0 && **b != -1.0) {
        return Err(Error::Config(format!("label {b} is not +1 or -1")));
    }
    Ok(())
}

/// Shared data-fit part: `(1/n) sum_i log(1 + exp(-b_i a_i^T x))`.
#[derive(Debug, Clone)]
struct LogisticData {
    features: CsrMatrix,
    labels: Vec<f64>,
    l0: f64,
}

impl LogisticData {
    fn new(features: CsrMatrix, labels: Vec<f64>) -> Result<Self> {
        check_labels(&features, &labels)?;
        let n = features.n_rows() as f64;
        let l0 = features.gram_lambda_max(POWER_ITER_TOL, POWER_ITER_MAX) / (4.0 * n);
        Ok(Self { features, labels, l0 })
    }

    fn n(&self) -> usize {
        self.labels.len()
    }

    fn term(&self, i: usize, x: &[f64]) -> f64 {
        softplus(-self.labels[i] * self.features.row_dot(i, x))
    }

    fn value(&self, x: &[f64]) -> f64 {
        (0..self.n()).map(|i| self.term(i, x)).sum::<f64>() / self.n() as f64
    }

    fn add_term_gradient(&self, i: usize, x: &[f64], weight: f64, out: &mut [f64]) {
        let b = self.labels[i];
        let coef = -b * sigmoid(-b * self.features.row_dot(i, x));
        self.features.row_axpy(i, weight * coef, out);
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let w = 1.0 / self.n() as f64;
        for i in 0..self.n() {
            self.add_term_gradient(i, x, w, &mut g);
        }
        g
    }
}

/// `l2`-regularized logistic regression
/// `f(x) = (1/n) sum_i log(1 + exp(-b_i a_i^T x)) + (lambda/2)|x|^2`.
#[derive(Debug, Clone)]
pub struct LogisticLoss {
    data: LogisticData,
    lambda: f64,
    lower_bound: Option<f64>,
    term_inf: Vec<f64>,
}

impl LogisticLoss {
    pub fn new(features: CsrMatrix, labels: Vec<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("regularization {lambda} must be finite and >= 0")));
        }
        let data = LogisticData::new(features, labels)?;
        let term_inf = (0..data.n()).map(|i| logistic_term_infimum(data.features.row_norm_sq(i), lambda)).collect();
        Ok(Self { data, lambda, lower_bound: None, term_inf })
    }

    /// Picks `lambda = L_0 / (kappa - 1)` so that `L_f / mu_f = kappa`, where
    /// `L_0` is the smoothness of the unregularized part.
    pub fn with_condition_number(features: CsrMatrix, labels: Vec<f64>, kappa: f64) -> Result<Self> {
        if !(kappa > 1.0 && kappa.is_finite()) {
            return Err(Error::Config(format!("condition number {kappa} must be > 1")));
        }
        let data = LogisticData::new(features, labels)?;
        let lambda = data.l0 / (kappa - 1.0);
        if lambda <= 0.0 {
            return Err(Error::Config("data has zero curvature; condition number cannot be targeted".into()));
        }
        Self::new(data.features, data.labels, lambda)
    }

    /// Records a numerically computed `f^inf`.
    pub fn with_lower_bound(mut self, f_inf: f64) -> Self {
        self.lower_bound = Some(f_inf);
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn unregularized_smoothness(&self) -> f64 {
        self.data.l0
    }

    pub fn features(&self) -> &CsrMatrix {
        &self.data.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.data.labels
    }
}

/// `min_x log(1 + exp(-b a^T x)) + (lambda/2)|x|^2`. The minimizer lies on
/// `x = theta b a`, where `lambda theta = sigmoid(-theta |a|^2)`.
fn logistic_term_infimum(a_sq: f64, lambda: f64) -> f64 {
    if a_sq == 0.0 {
        return std::f64::consts::LN_2;
    }
    if lambda == 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0 / lambda);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if lambda * mid - sigmoid(-mid * a_sq) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = 0.5 * (lo + hi);
    softplus(-theta * a_sq) + 0.5 * lambda * theta * theta * a_sq
}

impl Loss for LogisticLoss {
    fn dim(&self) -> usize {
        self.data.features.n_cols()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.data.value(x) + 0.5 * self.lambda * linalg::norm_sq(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.data.gradient(x);
        linalg::axpy(self.lambda, x, &mut g);
        g
    }

    fn smoothness(&self) -> f64 {
        self.data.l0 + self.lambda
    }

    fn strong_convexity(&self) -> f64 {
        self.lambda
    }

    fn is_convex(&self) -> bool {
        true
    }

    fn lower_bound(&self) -> Option<f64> {
        self.lower_bound
    }

    fn finite_sum(&self) -> Option<&dyn FiniteSum> {
        Some(self)
    }
}

impl FiniteSum for LogisticLoss {
    fn n_terms(&self) -> usize {
        self.data.n()
    }

    fn term_value(&self, i: usize, x: &[f64]) -> f64 {
        self.data.term(i, x) + 0.5 * self.lambda * linalg::norm_sq(x)
    }

    fn add_term_gradient(&self, i: usize, x: &[f64], weight: f64, out: &mut [f64]) {
        self.data.add_term_gradient(i, x, weight, out);
        linalg::axpy(weight * self.lambda, x, out);
    }

    fn term_smoothness(&self, i: usize) -> f64 {
        self.data.features.row_norm_sq(i) / 4.0 + self.lambda
    }

    fn term_lower_bound(&self, i: usize) -> Option<f64> {
        Some(self.term_inf[i])
    }
}

/// Logistic data fit plus the bounded nonconvex penalty
/// `lambda sum_j x_j^2 / (1 + x_j^2)`.
#[derive(Debug, Clone)]
pub struct NonconvexLogisticLoss {
    data: LogisticData,
    lambda: f64,
    lower_bound: Option<f64>,
}

impl NonconvexLogisticLoss {
    pub fn new(features: CsrMatrix, labels: Vec<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("regularization {lambda} must be finite and >= 0")));
        }
        Ok(Self { data: LogisticData::new(features, labels)?, lambda, lower_bound: None })
    }

    pub fn with_lower_bound(mut self, f_inf: f64) -> Self {
        self.lower_bound = Some(f_inf);
        self
    }

    fn penalty(&self, x: &[f64]) -> f64 {
        self.lambda * x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>()
    }

    fn add_penalty_gradient(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            let q = 1.0 + v * v;
            *o += weight * self.lambda * 2.0 * v / (q * q);
        }
    }
}

impl Loss for NonconvexLogisticLoss {
    fn dim(&self) -> usize {
        self.data.features.n_cols()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.data.value(x) + self.penalty(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.data.gradient(x);
        self.add_penalty_gradient(x, 1.0, &mut g);
        g
    }

    // second derivative of t^2/(1+t^2) is bounded by 2 in absolute value
    fn smoothness(&self) -> f64 {
        self.data.l0 + 2.0 * self.lambda
    }

    fn strong_convexity(&self) -> f64 {
        0.0
    }

    fn is_convex(&self) -> bool {
        false
    }

    fn lower_bound(&self) -> Option<f64> {
        self.lower_bound
    }

    fn finite_sum(&self) -> Option<&dyn FiniteSum> {
        Some(self)
    }
}

impl FiniteSum for NonconvexLogisticLoss {
    fn n_terms(&self) -> usize {
        self.data.n()
    }

    fn term_value(&self, i: usize, x: &[f64]) -> f64 {
        self.data.term(i, x) + self.penalty(x)
    }

    fn add_term_gradient(&self, i: usize, x: &[f64], weight: f64, out: &mut [f64]) {
        self.data.add_term_gradient(i, x, weight, out);
        self.add_penalty_gradient(x, weight, out);
    }

    fn term_smoothness(&self, i: usize) -> f64 {
        self.data.features.row_norm_sq(i) / 4.0 + 2.0 * self.lambda
    }

    fn term_lower_bound(&self, _i: usize) -> Option<f64> {
        Some(0.0)
    }
}

#[derive(Debug, Clone)]
enum QuadMatrix {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

/// `f(x) = (1/2)(x - c)^T M (x - c) + offset` with `M` symmetric PSD.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    matrix: QuadMatrix,
    center: Vec<f64>,
    offset: f64,
    l_f: f64,
    mu_f: f64,
}

impl QuadraticLoss {
    pub fn diagonal(diag: Vec<f64>, center: Vec<f64>, offset: f64) -> Result<Self> {
        check_dim(diag.len(), center.len())?;
        if diag.is_empty() {
            return Err(Error::Config("quadratic needs dimension >= 1".into()));
        }
        if let Some(m) = diag.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
            return Err(Error::Config(format!("diagonal entry {m} is not a finite non-negative number")));
        }
        let l_f = diag.iter().copied().fold(0.0, f64::max);
        let mu_f = diag.iter().copied().fold(f64::INFINITY, f64::min);
        if l_f == 0.0 {
            return Err(Error::Config("quadratic matrix is zero".into()));
        }
        Self::finish(QuadMatrix::Diagonal(diag), center, offset, l_f, mu_f)
    }

    /// `(1/2)|x - c|^2 + offset`
    pub fn isotropic(center: Vec<f64>, offset: f64) -> Result<Self> {
        Self::diagonal(vec![1.0; center.len()], center, offset)
    }

    /// Dense symmetric matrix given row-major.
    pub fn dense(rows: Vec<Vec<f64>>, center: Vec<f64>, offset: f64) -> Result<Self> {
        let d = center.len();
        check_dim(d, rows.len())?;
        for r in &rows {
            check_dim(d, r.len())?;
        }
        let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        if (&m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
            return Err(Error::Config("quadratic matrix is not symmetric".into()));
        }
        let eig = m.clone().symmetric_eigen().eigenvalues;
        let (l_f, mu_f) = (eig.max(), eig.min().max(0.0));
        if eig.min() < -1e-12 * l_f.abs().max(1.0) {
            return Err(Error::Config(format!("quadratic matrix has negative eigenvalue {}", eig.min())));
        }
        if l_f <= 0.0 {
            return Err(Error::Config("quadratic matrix is zero".into()));
        }
        Self::finish(QuadMatrix::Dense(m), center, offset, l_f, mu_f)
    }

    fn finish(matrix: QuadMatrix, center: Vec<f64>, offset: f64, l_f: f64, mu_f: f64) -> Result<Self> {
        if !(offset >= 0.0 && offset.is_finite()) || !linalg::all_finite(&center) {
            return Err(Error::Config("quadratic center and offset must be finite, offset >= 0".into()));
        }
        Ok(Self { matrix, center, offset, l_f, mu_f })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// `M v`
    pub fn apply_matrix(&self, v: &[f64]) -> Vec<f64> {
        match &self.matrix {
            QuadMatrix::Diagonal(m) => m.iter().zip(v).map(|(a, b)| a * b).collect(),
            QuadMatrix::Dense(m) => (0..v.len()).map(|i| (0..v.len()).map(|j| m[(i, j)] * v[j]).sum()).collect(),
        }
    }

    pub fn diagonal_entries(&self) -> Option<&[f64]> {
        match &self.matrix {
            QuadMatrix::Diagonal(m) => Some(m),
            QuadMatrix::Dense(_) => None,
        }
    }
}

impl Loss for QuadraticLoss {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let r = linalg::sub(x, &self.center);
        0.5 * linalg::dot(&r, &self.apply_matrix(&r)) + self.offset
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.apply_matrix(&linalg::sub(x, &self.center))
    }

    fn smoothness(&self) -> f64 {
        self.l_f
    }

    fn strong_convexity(&self) -> f64 {
        self.mu_f
    }

    fn is_convex(&self) -> bool {
        true
    }

    fn lower_bound(&self) -> Option<f64> {
        Some(self.offset)
    }
}

/// Lower and upper ends of the sandwich `f(x*) <= f(x_D*) <= upper`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichBounds {
    pub lower: f64,
    pub upper: f64,
    pub f_at_xd: f64,
}

/// The sketched problem: a loss, a sketch distribution and a shift.
#[derive(Debug, Clone)]
pub struct MastProblem {
    loss: Arc<dyn Loss>,
    dist: SketchDistribution,
    shift: Vec<f64>,
    consts: SpectralConstants,
}

impl MastProblem {
    pub fn new(loss: Arc<dyn Loss>, dist: SketchDistribution, shift: Vec<f64>) -> Result<Self> {
        check_dim(loss.dim(), dist.dim())?;
        check_dim(loss.dim(), shift.len())?;
        if !linalg::all_finite(&shift) {
            return Err(Error::NonFinite("shift".into()));
        }
        let consts = dist.spectral_constants();
        Ok(Self { loss, dist, shift, consts })
    }

    /// Zero shift.
    pub fn unshifted(loss: Arc<dyn Loss>, dist: SketchDistribution) -> Result<Self> {
        let d = loss.dim();
        Self::new(loss, dist, vec![0.0; d])
    }

    pub fn loss(&self) -> &dyn Loss {
        self.loss.as_ref()
    }

    pub fn loss_arc(&self) -> &Arc<dyn Loss> {
        &self.loss
    }

    pub fn dist(&self) -> &SketchDistribution {
        &self.dist
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn constants(&self) -> SpectralConstants {
        self.consts
    }

    /// Same loss and distribution under a new shift.
    pub fn with_shift(&self, shift: Vec<f64>) -> Result<Self> {
        Self::new(self.loss.clone(), self.dist.clone(), shift)
    }

    fn check(&self, sketch: &SketchSample, x: &[f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), sketch.dim())
    }

    /// `s + S(x - s)`
    pub fn sketched_point(&self, sketch: &SketchSample, x: &[f64]) -> Result<Vec<f64>> {
        self.check(sketch, x)?;
        let mut y = self.shift.clone();
        for &(i, c) in sketch.entries() {
            y[i] += c * (x[i] - self.shift[i]);
        }
        Ok(y)
    }

    /// `f_S(x)`
    pub fn sketched_value(&self, sketch: &SketchSample, x: &[f64]) -> Result<f64> {
        Ok(self.loss.value(&self.sketched_point(sketch, x)?))
    }

    /// `S^T grad f(s + S(x - s))`
    pub fn estimator_gradient(&self, sketch: &SketchSample, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.sketched_point(sketch, x)?;
        sketch.apply_transpose(&self.loss.gradient(&y))
    }

    /// `f~(x)` by enumerating the support.
    pub fn exact_tilde_value(&self, x: &[f64], limit: u128) -> Result<f64> {
        let support = self.dist.enumerate_support(limit)?;
        self.tilde_value_over(&support, x)
    }

    /// `grad f~(x)` by enumerating the support.
    pub fn exact_tilde_gradient(&self, x: &[f64], limit: u128) -> Result<Vec<f64>> {
        let support = self.dist.enumerate_support(limit)?;
        self.tilde_gradient_over(&support, x)
    }

    /// Expectation of `f_S(x)` over an enumerated support.
    pub fn tilde_value_over(&self, support: &[(SketchSample, f64)], x: &[f64]) -> Result<f64> {
        let vals = support
            .iter()
            .map(|(s, _)| self.sketched_value(s, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(weighted_mean(support, self.dist.is_uniform(), &vals))
    }

    /// Expectation of `grad f_S(x)` over an enumerated support.
    ///
    /// Uniform supports are summed in order and divided by their size once, so
    /// any full pass over the support in the same order reproduces this value
    /// bit for bit.
    pub fn tilde_gradient_over(&self, support: &[(SketchSample, f64)], x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut acc = vec![0.0; self.dim()];
        let uniform = self.dist.is_uniform();
        for (s, p) in support {
            let g = self.estimator_gradient(s, x)?;
            linalg::axpy(if uniform { 1.0 } else { *p }, &g, &mut acc);
        }
        if uniform {
            linalg::scale(1.0 / support.len() as f64, &mut acc);
        }
        Ok(acc)
    }

    /// Sample mean and standard error of `f_S(x)` over `n_samples` sketches.
    pub fn monte_carlo_tilde_value<R: Rng + ?Sized>(&self, x: &[f64], n_samples: usize, rng: &mut R) -> Result<(f64, f64)> {
        check_dim(self.dim(), x.len())?;
        if n_samples < 2 {
            return Err(Error::Config(format!("monte carlo needs at least 2 samples, got {n_samples}")));
        }
        // Welford
        let (mut mean, mut m2) = (0.0, 0.0);
        for k in 0..n_samples {
            let v = self.sketched_value(&self.dist.sample(rng), x)?;
            let delta = v - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (v - mean);
        }
        let var = m2 / (n_samples - 1) as f64;
        Ok((mean, (var / n_samples as f64).sqrt()))
    }

    /// Ends of the sandwich between the sketched and original minimizers:
    /// `f(x*) <= f(x_D*) <= f(x*) + (L_D-1)L_f/2 |x*-s|^2 - (mu_D-1)mu_f/2 |x_D*-s|^2`.
    pub fn mast_sandwich_bounds(&self, x_star: &[f64], x_d_star: &[f64]) -> Result<SandwichBounds> {
        check_dim(self.dim(), x_star.len())?;
        check_dim(self.dim(), x_d_star.len())?;
        let mu_f = self.loss.strong_convexity();
        if mu_f <= 0.0 {
            return Err(Error::Unsupported("sandwich bounds need a strongly convex loss".into()));
        }
        let c = self.consts;
        let lower = self.loss.value(x_star);
        let upper = lower + 0.5 * (c.l_d - 1.0) * self.loss.smoothness() * linalg::dist_sq(x_star, &self.shift)
            - 0.5 * (c.mu_d - 1.0) * mu_f * linalg::dist_sq(x_d_star, &self.shift);
        Ok(SandwichBounds { lower, upper, f_at_xd: self.loss.value(x_d_star) })
    }
}

fn weighted_mean(support: &[(SketchSample, f64)], uniform: bool, vals: &[f64]) -> f64 {
    if uniform {
        vals.iter().sum::<f64>() / vals.len() as f64
    } else {
        support.iter().zip(vals).map(|((_, p), v)| p * v).sum()
    }
}

/// `(A, B, C)` in `E|g|^2 <= 2A(f_S - f_S^inf) + B|grad f_S|^2 + C`.
/// `c` is `None` when it depends on infima that are not known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbcConstants {
    pub a: f64,
    pub b: f64,
    pub c: Option<f64>,
}

/// Inner gradient estimator for a fixed sketch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AbcEstimator {
    Exact,
    /// Adds Gaussian noise with total variance `sigma2`.
    BoundedVariance { sigma2: f64 },
    /// Averages `batch` data terms drawn uniformly without replacement.
    UniformSubsample { batch: usize },
}

impl AbcEstimator {
    /// For subsampling, `A = max_i L_{f_i}`, `B = 0` and
    /// `C = 2A(f^inf - mean_i f_i^inf)`.
    pub fn constants(&self, loss: &dyn Loss) -> Result<AbcConstants> {
        match *self {
            Self::Exact => Ok(AbcConstants { a: 0.0, b: 1.0, c: Some(0.0) }),
            Self::BoundedVariance { sigma2 } => {
                if !(sigma2 >= 0.0 && sigma2.is_finite()) {
                    return Err(Error::Config(format!("variance {sigma2} must be finite and >= 0")));
                }
                Ok(AbcConstants { a: 0.0, b: 1.0, c: Some(sigma2) })
            }
            Self::UniformSubsample { .. } => {
                let fs = finite_sum_of(loss)?;
                let n = fs.n_terms();
                let a = (0..n).map(|i| fs.term_smoothness(i)).fold(0.0, f64::max);
                let mean_inf = (0..n).map(|i| fs.term_lower_bound(i)).sum::<Option<f64>>().map(|s| s / n as f64);
                let c = match (loss.lower_bound(), mean_inf) {
                    (Some(f_inf), Some(m)) => Some(2.0 * a * (f_inf - m).max(0.0)),
                    _ => None,
                };
                Ok(AbcConstants { a, b: 0.0, c })
            }
        }
    }

    /// Draws `g_S(x)` with `E[g_S(x)] = grad f_S(x)`.
    pub fn inner_estimate<R: Rng + ?Sized>(
        &self,
        p: &MastProblem,
        sketch: &SketchSample,
        x: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        match *self {
            Self::Exact => p.estimator_gradient(sketch, x),
            Self::BoundedVariance { sigma2 } => {
                let mut g = p.estimator_gradient(sketch, x)?;
                if sigma2 > 0.0 {
                    let sd = (sigma2 / g.len() as f64).sqrt();
                    for v in &mut g {
                        *v += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                Ok(g)
            }
            Self::UniformSubsample { batch } => {
                let fs = finite_sum_of(p.loss())?;
                let n = fs.n_terms();
                if batch == 0 || batch > n {
                    return Err(Error::Config(format!("batch {batch} outside 1..={n}")));
                }
                if batch == n {
                    return p.estimator_gradient(sketch, x);
                }
                let mut idx = rand::seq::index::sample(rng, n, batch).into_vec();
                idx.sort_unstable();
                let y = p.sketched_point(sketch, x)?;
                let mut g = vec![0.0; y.len()];
                for &i in &idx {
                    fs.add_term_gradient(i, &y, 1.0, &mut g);
                }
                linalg::scale(1.0 / batch as f64, &mut g);
                sketch.apply_transpose(&g)
            }
        }
    }
}

fn finite_sum_of(loss: &dyn Loss) -> Result<&dyn FiniteSum> {
    loss.finite_sum()
        .ok_or_else(|| Error::Unsupported("subsampling needs a loss with finite-sum structure".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_gradient;
    use crate::rng;
    use crate::sketch::DEFAULT_SUPPORT_LIMIT;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toy_features() -> (CsrMatrix, Vec<f64>) {
        let rows = vec![
            vec![(0, 1.0), (2, -0.5)],
            vec![(1, 2.0)],
            vec![(0, -1.0), (1, 0.5), (2, 1.5)],
            vec![(2, 0.3)],
            vec![(0, 0.7), (1, -1.2)],
        ];
        (CsrMatrix::from_rows(3, &rows), vec![1.0, -1.0, 1.0, 1.0, -1.0])
    }

    fn half_norm(d: usize) -> Arc<dyn Loss> {
        Arc::new(QuadraticLoss::isotropic(vec![0.0; d], 0.0).unwrap())
    }

    fn diag(v: &[f64]) -> SketchSample {
        SketchSample::from_diagonal(v).unwrap()
    }

    #[test]
    fn logistic_value_at_zero_is_log_two() {
        let (a, b) = toy_features();
        let l = LogisticLoss::new(a, b, 0.3).unwrap();
        assert_relative_eq!(l.value(&[0.0; 3]), std::f64::consts::LN_2, max_relative = 1e-15);
    }

    #[test]
    fn logistic_constants() {
        let (a, b) = toy_features();
        let l = LogisticLoss::with_condition_number(a.clone(), b.clone(), 100.0).unwrap();
        assert_relative_eq!(l.smoothness() / l.strong_convexity(), 100.0, max_relative = 1e-12);
        let lam = a.gram_lambda_max(1e-12, 10_000);
        assert_relative_eq!(l.unregularized_smoothness(), lam / 20.0, max_relative = 1e-7);
    }

    #[test]
    fn logistic_term_infimum_is_minimum() {
        for (a_sq, lam) in [(1.0, 0.1), (4.0, 0.01), (0.25, 2.0)] {
            let inf = logistic_term_infimum(a_sq, lam);
            // brute force along the optimal ray
            let best = (0..200_000)
                .map(|k| k as f64 * 1e-4)
                .map(|t| softplus(-t * a_sq) + 0.5 * lam * t * t * a_sq)
                .fold(f64::INFINITY, f64::min);
            assert!(inf <= best + 1e-12 && best - inf < 1e-7, "{inf} vs {best}");
        }
        assert_eq!(logistic_term_infimum(0.0, 1.0), std::f64::consts::LN_2);
        assert_eq!(logistic_term_infimum(1.0, 0.0), 0.0);
    }

    #[test]
    fn term_gradients_average_to_full() {
        let (a, b) = toy_features();
        let l = NonconvexLogisticLoss::new(a, b, 0.2).unwrap();
        let x = [0.3, -1.0, 2.0];
        let fs = l.finite_sum().unwrap();
        let mut g = vec![0.0; 3];
        for i in 0..fs.n_terms() {
            fs.add_term_gradient(i, &x, 1.0 / 5.0, &mut g);
        }
        let full = l.gradient(&x);
        for k in 0..3 {
            assert_relative_eq!(g[k], full[k], max_relative = 1e-12);
        }
        let v = (0..5).map(|i| fs.term_value(i, &x)).sum::<f64>() / 5.0;
        assert_relative_eq!(v, l.value(&x), max_relative = 1e-12);
    }

    #[test]
    fn quadratic_invariants() {
        let q = QuadraticLoss::diagonal(vec![2.0, 0.5], vec![1.0, -1.0], 0.25).unwrap();
        assert_eq!(q.value(&[1.0, -1.0]), 0.25);
        assert_eq!((q.smoothness(), q.strong_convexity(), q.lower_bound()), (2.0, 0.5, Some(0.25)));
        let dq = QuadraticLoss::dense(vec![vec![2.0, 1.0], vec![1.0, 2.0]], vec![0.0, 0.0], 0.0).unwrap();
        assert_relative_eq!(dq.smoothness(), 3.0, max_relative = 1e-12);
        assert_relative_eq!(dq.strong_convexity(), 1.0, max_relative = 1e-12);
        assert!(QuadraticLoss::dense(vec![vec![1.0, 2.0], vec![0.0, 1.0]], vec![0.0; 2], 0.0).is_err());
        assert!(QuadraticLoss::dense(vec![vec![1.0, 2.0], vec![2.0, 1.0]], vec![0.0; 2], 0.0).is_err());
    }

    #[test]
    fn sketched_value_examples() {
        let p = MastProblem::unshifted(half_norm(2), SketchDistribution::rand_k(2, 1).unwrap()).unwrap();
        assert_eq!(p.sketched_value(&diag(&[2.0, 0.0]), &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(p.sketched_value(&SketchSample::identity(2), &[1.0, 3.0]).unwrap(), 5.0);
        let shifted = p.with_shift(vec![0.5, -2.0]).unwrap();
        assert_eq!(shifted.sketched_value(&diag(&[0.0, 0.0]), &[0.5, -2.0]).unwrap(), p.loss().value(&[0.5, -2.0]));
    }

    #[test]
    fn estimator_gradient_example() {
        let p = MastProblem::unshifted(half_norm(2), SketchDistribution::rand_k(2, 1).unwrap()).unwrap();
        assert_eq!(p.estimator_gradient(&diag(&[2.0, 0.0]), &[1.0, 1.0]).unwrap(), vec![4.0, 0.0]);
        assert_eq!(p.estimator_gradient(&SketchSample::identity(2), &[1.0, 3.0]).unwrap(), vec![1.0, 3.0]);
    }

    #[test]
    fn exact_tilde_value_examples() {
        let p = MastProblem::unshifted(half_norm(2), SketchDistribution::rand_k(2, 1).unwrap()).unwrap();
        assert_eq!(p.exact_tilde_value(&[1.0, 1.0], DEFAULT_SUPPORT_LIMIT).unwrap(), 2.0);
        let id = MastProblem::unshifted(half_norm(2), SketchDistribution::identity(2).unwrap()).unwrap();
        assert_eq!(id.exact_tilde_value(&[1.0, 3.0], 10).unwrap(), 5.0);
    }

    #[test]
    fn monte_carlo_identity_has_zero_error() {
        let id = MastProblem::unshifted(half_norm(2), SketchDistribution::identity(2).unwrap()).unwrap();
        let (m, se) = id.monte_carlo_tilde_value(&[1.0, 3.0], 10, &mut rng::derive(0, &[])).unwrap();
        assert_eq!((m, se), (5.0, 0.0));
        assert!(id.monte_carlo_tilde_value(&[1.0, 3.0], 1, &mut rng::derive(0, &[])).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration() {
        let (a, b) = toy_features();
        let l: Arc<dyn Loss> = Arc::new(LogisticLoss::new(a, b, 0.1).unwrap());
        let p = MastProblem::new(l, SketchDistribution::rand_k(3, 1).unwrap(), vec![0.1, 0.2, -0.3]).unwrap();
        let x = [1.0, -2.0, 0.5];
        let exact = p.exact_tilde_value(&x, 100).unwrap();
        let (m, se) = p.monte_carlo_tilde_value(&x, 20_000, &mut rng::derive(1, &[])).unwrap();
        assert!((m - exact).abs() <= 4.0 * se, "{m} {exact} {se}");
    }

    #[test]
    fn sandwich_examples() {
        let p = MastProblem::unshifted(half_norm(2), SketchDistribution::rand_k(2, 1).unwrap()).unwrap();
        let b = p.mast_sandwich_bounds(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!((b.lower, b.upper, b.f_at_xd), (0.0, 0.0, 0.0));
        let q = QuadraticLoss::isotropic(vec![1.0, 2.0], 0.0).unwrap();
        let id = MastProblem::unshifted(Arc::new(q), SketchDistribution::identity(2).unwrap()).unwrap();
        let b = id.mast_sandwich_bounds(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(b.lower, b.upper);
        let (a, lab) = toy_features();
        let nc = MastProblem::unshifted(Arc::new(NonconvexLogisticLoss::new(a, lab, 0.1).unwrap()), SketchDistribution::identity(3).unwrap()).unwrap();
        assert!(matches!(nc.mast_sandwich_bounds(&[0.0; 3], &[0.0; 3]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn dimension_checks() {
        let p = MastProblem::unshifted(half_norm(2), SketchDistribution::rand_k(2, 1).unwrap()).unwrap();
        assert!(p.sketched_value(&SketchSample::identity(3), &[1.0, 1.0]).is_err());
        assert!(p.estimator_gradient(&SketchSample::identity(2), &[1.0]).is_err());
        assert!(MastProblem::unshifted(half_norm(2), SketchDistribution::identity(3).unwrap()).is_err());
    }

    #[test]
    fn inner_estimate_reductions() {
        let (a, b) = toy_features();
        let l: Arc<dyn Loss> = Arc::new(LogisticLoss::new(a, b, 0.1).unwrap());
        let p = MastProblem::unshifted(l, SketchDistribution::rand_k(3, 2).unwrap()).unwrap();
        let s = diag(&[1.5, 0.0, 1.5]);
        let x = [0.2, 0.4, -1.0];
        let exact = p.estimator_gradient(&s, &x).unwrap();
        let mut r = rng::derive(2, &[]);
        for e in [AbcEstimator::Exact, AbcEstimator::BoundedVariance { sigma2: 0.0 }, AbcEstimator::UniformSubsample { batch: 5 }] {
            assert_eq!(e.inner_estimate(&p, &s, &x, &mut r).unwrap(), exact);
        }
    }

    #[test]
    fn subsample_is_unbiased() {
        let (a, b) = toy_features();
        let l: Arc<dyn Loss> = Arc::new(LogisticLoss::new(a, b, 0.1).unwrap());
        let p = MastProblem::unshifted(l, SketchDistribution::rand_k(3, 2).unwrap()).unwrap();
        let s = diag(&[1.5, 0.0, 1.5]);
        let x = [0.2, 0.4, -1.0];
        let exact = p.estimator_gradient(&s, &x).unwrap();
        let e = AbcEstimator::UniformSubsample { batch: 2 };
        let n = 40_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut r = rng::derive(3, &[]);
        for _ in 0..n {
            let g = e.inner_estimate(&p, &s, &x, &mut r).unwrap();
            for k in 0..3 {
                sum[k] += g[k];
                sq[k] += g[k] * g[k];
            }
        }
        for k in 0..3 {
            let m = sum[k] / n as f64;
            let var = sq[k] / n as f64 - m * m;
            assert!((m - exact[k]).abs() <= 4.0 * (var / n as f64).sqrt() + 1e-15, "coord {k}");
        }
    }

    #[test]
    fn abc_constants() {
        let q = QuadraticLoss::isotropic(vec![0.0; 2], 0.0).unwrap();
        assert_eq!(AbcEstimator::Exact.constants(&q).unwrap(), AbcConstants { a: 0.0, b: 1.0, c: Some(0.0) });
        assert_eq!(AbcEstimator::BoundedVariance { sigma2: 2.0 }.constants(&q).unwrap().c, Some(2.0));
        assert!(matches!(AbcEstimator::UniformSubsample { batch: 1 }.constants(&q), Err(Error::Unsupported(_))));
        let (a, b) = toy_features();
        let l = LogisticLoss::new(a.clone(), b, 0.1).unwrap();
        let k = AbcEstimator::UniformSubsample { batch: 1 }.constants(&l).unwrap();
        let max_row = (0..5).map(|i| a.row_norm_sq(i)).fold(0.0, f64::max);
        assert_relative_eq!(k.a, max_row / 4.0 + 0.1);
        assert_eq!((k.b, k.c), (0.0, None));
        let k = AbcEstimator::UniformSubsample { batch: 1 }.constants(&l.with_lower_bound(0.5)).unwrap();
        assert!(k.c.unwrap() >= 0.0);
    }

    #[test]
    fn sparse_sketch_gives_sparse_gradient() {
        let (a, b) = toy_features();
        let l: Arc<dyn Loss> = Arc::new(LogisticLoss::new(a, b, 0.1).unwrap());
        let dist = SketchDistribution::rand_k(3, 1).unwrap();
        let p = MastProblem::new(l, dist.clone(), vec![1.0, 1.0, 1.0]).unwrap();
        for seed in 0..10 {
            let s = dist.sample(&mut rng::derive(seed, &[]));
            assert!(linalg::nnz(&p.estimator_gradient(&s, &[0.5, -0.5, 2.0]).unwrap()) <= 1);
        }
    }

    proptest! {
        #[test]
        fn losses_match_finite_differences(x in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let (a, b) = toy_features();
            let losses: Vec<Box<dyn Loss>> = vec![
                Box::new(LogisticLoss::new(a.clone(), b.clone(), 0.1).unwrap()),
                Box::new(NonconvexLogisticLoss::new(a.clone(), b.clone(), 0.5).unwrap()),
                Box::new(QuadraticLoss::dense(vec![vec![2.0, 0.5, 0.0], vec![0.5, 1.0, 0.1], vec![0.0, 0.1, 3.0]], vec![1.0, 0.0, -1.0], 0.5).unwrap()),
            ];
            for l in &losses {
                let fd = finite_diff_gradient(l.as_ref(), &x, 1e-6).unwrap();
                let g = l.gradient(&x);
                let scale = linalg::norm_sq(&g).sqrt().max(1e-3);
                for k in 0..3 {
                    prop_assert!((fd[k] - g[k]).abs() <= 1e-5 * scale, "{l:?} coord {k}: {} vs {}", fd[k], g[k]);
                }
            }
        }

        #[test]
        fn logistic_strong_convexity_holds(x in proptest::collection::vec(-3.0f64..3.0, 3), y in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let (a, b) = toy_features();
            let l = LogisticLoss::new(a, b, 0.3).unwrap();
            let lhs = l.value(&y);
            let rhs = l.value(&x) + linalg::dot(&l.gradient(&x), &linalg::sub(&y, &x)) + 0.15 * linalg::dist_sq(&x, &y);
            prop_assert!(lhs >= rhs - 1e-12);
        }

        #[test]
        fn tilde_smoothness_descent(x in proptest::collection::vec(-3.0f64..3.0, 3), h in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let (a, b) = toy_features();
            let l: Arc<dyn Loss> = Arc::new(LogisticLoss::new(a, b, 0.1).unwrap());
            let lf = l.smoothness();
            let p = MastProblem::new(l, SketchDistribution::bernoulli(vec![0.5, 0.8, 0.3]).unwrap(), vec![0.3, 0.0, -0.2]).unwrap();
            let xh = linalg::add(&x, &h);
            let lhs = p.exact_tilde_value(&xh, 100).unwrap();
            let g = p.exact_tilde_gradient(&x, 100).unwrap();
            let rhs = p.exact_tilde_value(&x, 100).unwrap() + linalg::dot(&g, &h) + 0.5 * p.constants().l_d * lf * linalg::norm_sq(&h);
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }
}
