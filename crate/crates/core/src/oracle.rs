//! Reference computations: finite differences, high-accuracy minimizers and a
//! numeric checker for the inequalities relating `f`, `f_S` and `f~`.
//!
//! Nothing here calls into [`crate::solvers`]; the solvers are tested against
//! these routines.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::objective::{Loss, MastProblem, QuadraticLoss};
use crate::sketch::{SketchDistribution, SketchSample};

/// Default iteration cap for [`solve_reference`].
pub const REFERENCE_MAX_ITER: u64 = 10_000_000;

/// Gate on relative violations in [`verify_inequality_suite`].
pub const VIOLATION_TOL: f64 = 1e-9;

/// Central differences with step `h_scale * (1 + |x_i|)`.
pub fn finite_diff_gradient(loss: &dyn Loss, x: &[f64], h_scale: f64) -> Result<Vec<f64>> {
    check_dim(loss.dim(), x.len())?;
    finite_diff(|y| Ok(loss.value(y)), x, h_scale)
}

/// Central differences of an arbitrary function, as in [`finite_diff_gradient`].
pub fn finite_diff(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h_scale: f64) -> Result<Vec<f64>> {
    if !(h_scale > 0.0 && h_scale.is_finite()) {
        return Err(Error::Config(format!("finite-difference scale {h_scale} must be positive")));
    }
    let mut y = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = h_scale * (1.0 + x[i].abs());
        y[i] = x[i] + h;
        let fp = f(&y)?;
        y[i] = x[i] - h;
        let fm = f(&y)?;
        y[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("loss at stencil of coordinate {i}")));
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// A smooth function the reference solver can minimize.
pub trait SmoothObjective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Gradient Lipschitz constant.
    fn smoothness(&self) -> f64;
}

/// Plain loss `f`.
pub struct LossObjective<'a>(pub &'a dyn Loss);

impl SmoothObjective for LossObjective<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.0.dim(), x.len())?;
        Ok(self.0.value(x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.0.dim(), x.len())?;
        Ok(self.0.gradient(x))
    }

    fn smoothness(&self) -> f64 {
        self.0.smoothness()
    }
}

/// Sketched objective `f~` evaluated exactly over its enumerated support.
pub struct TildeObjective<'a> {
    problem: &'a MastProblem,
    support: Vec<(SketchSample, f64)>,
}

impl<'a> TildeObjective<'a> {
    pub fn new(problem: &'a MastProblem, limit: u128) -> Result<Self> {
        Ok(Self { problem, support: problem.dist().enumerate_support(limit)? })
    }

    pub fn support(&self) -> &[(SketchSample, f64)] {
        &self.support
    }
}

impl SmoothObjective for TildeObjective<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.problem.tilde_value_over(&self.support, x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.problem.tilde_gradient_over(&self.support, x)
    }

    fn smoothness(&self) -> f64 {
        self.problem.constants().l_d * self.problem.loss().smoothness()
    }
}

/// Result of [`solve_reference`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm_sq: f64,
    pub iterations: u64,
}

/// Gradient descent with step `1/L` from `x0` until `|grad|^2 <= tol_grad_sq`.
pub fn solve_reference(obj: &dyn SmoothObjective, x0: &[f64], tol_grad_sq: f64, max_iter: u64) -> Result<Reference> {
    check_dim(obj.dim(), x0.len())?;
    let step = 1.0 / obj.smoothness();
    let mut x = x0.to_vec();
    let mut g = obj.gradient(&x)?;
    let mut gn = linalg::norm_sq(&g);
    let mut it = 0;
    while gn > tol_grad_sq {
        if it == max_iter {
            return Err(Error::IterationCap { iterations: it, grad_norm_sq: gn });
        }
        linalg::axpy(-step, &g, &mut x);
        g = obj.gradient(&x)?;
        gn = linalg::norm_sq(&g);
        if !gn.is_finite() {
            return Err(Error::NonFinite(format!("gradient at iteration {it}")));
        }
        it += 1;
    }
    Ok(Reference { value: obj.value(&x)?, x, grad_norm_sq: gn, iterations: it })
}

/// `x^{t+1} = x^t - gamma grad(x^t)`, returning `x^0 ..= x^T`.
pub fn gd_trajectory(obj: &dyn SmoothObjective, x0: &[f64], gamma: f64, iterations: usize) -> Result<Vec<Vec<f64>>> {
    check_dim(obj.dim(), x0.len())?;
    let mut out = Vec::with_capacity(iterations + 1);
    let mut x = x0.to_vec();
    out.push(x.clone());
    for _ in 0..iterations {
        let g = obj.gradient(&x)?;
        linalg::axpy(-gamma, &g, &mut x);
        out.push(x.clone());
    }
    Ok(out)
}

/// Closed-form minimizer and minimum of `f~` for a diagonal quadratic loss
/// under any diagonal sketch distribution: coordinate `i` sits at
/// `s_i + (c_i - s_i) / E[S_ii^2]`.
pub fn diagonal_quadratic_optimum(q: &QuadraticLoss, dist: &SketchDistribution, shift: &[f64]) -> Result<(Vec<f64>, f64)> {
    let m = q
        .diagonal_entries()
        .ok_or_else(|| Error::Unsupported("closed form needs a diagonal quadratic".into()))?;
    check_dim(m.len(), dist.dim())?;
    check_dim(m.len(), shift.len())?;
    let second = dist.second_moment_diagonal();
    let c = q.center();
    let mut x = Vec::with_capacity(m.len());
    let mut val = q.lower_bound().unwrap_or(0.0);
    for i in 0..m.len() {
        let r = shift[i] - c[i];
        x.push(shift[i] - r / second[i]);
        val += 0.5 * m[i] * r * r * (1.0 - 1.0 / second[i]);
    }
    Ok((x, val))
}

/// Constants used by [`verify_inequality_suite`]. Defaults come from the
/// problem; overriding them injects faults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConstants {
    pub l_f: f64,
    pub mu_f: f64,
    pub l_d: f64,
    pub mu_d: f64,
    pub l_s_max: f64,
}

impl SuiteConstants {
    pub fn of(p: &MastProblem) -> Self {
        let c = p.constants();
        Self {
            l_f: p.loss().smoothness(),
            mu_f: p.loss().strong_convexity(),
            l_d: c.l_d,
            mu_d: c.mu_d,
            l_s_max: c.l_s_max,
        }
    }
}

/// One checked inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalityRow {
    pub id: &'static str,
    /// Largest `max(0, lhs - rhs) / max(1, |lhs|, |rhs|)` over the points.
    pub max_violation: f64,
    /// Index into [`InequalityReport::points`] where it occurred.
    pub worst_point: usize,
    pub evaluations: usize,
}

impl InequalityRow {
    pub fn holds(&self) -> bool {
        self.max_violation <= VIOLATION_TOL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InequalityReport {
    pub rows: Vec<InequalityRow>,
    pub points: Vec<Vec<f64>>,
}

impl InequalityReport {
    pub fn all_hold(&self) -> bool {
        self.rows.iter().all(InequalityRow::holds)
    }

    pub fn row(&self, id: &str) -> Option<&InequalityRow> {
        self.rows.iter().find(|r| r.id == id)
    }
}

struct Tracker {
    id: &'static str,
    worst: f64,
    at: usize,
    n: usize,
}

impl Tracker {
    fn new(id: &'static str) -> Self {
        Self { id, worst: 0.0, at: 0, n: 0 }
    }

    /// Records `lhs <= rhs` at point `k`.
    fn le(&mut self, lhs: f64, rhs: f64, k: usize) {
        let v = if lhs.is_nan() || rhs.is_nan() {
            f64::INFINITY
        } else {
            (lhs - rhs).max(0.0) / 1f64.max(lhs.abs()).max(rhs.abs())
        };
        if v > self.worst || self.n == 0 {
            self.worst = self.worst.max(v);
            self.at = k;
        }
        self.n += 1;
    }

    fn row(self) -> InequalityRow {
        InequalityRow { id: self.id, max_violation: self.worst, worst_point: self.at, evaluations: self.n }
    }
}

/// Tolerances for the internal minimizer solves.
const SUITE_TOL_GRAD_SQ: f64 = 1e-24;

/// Checks the smoothness, convexity and second-moment inequalities linking
/// `f`, every `f_S` and `f~` at `n_points` standard-normal points plus
/// `{0, s, x*, x_D*}`. Expectations are exact over the enumerated support.
///
/// Convexity rows need a convex loss; strong-convexity rows and the sandwich
/// row need `mu_f > 0`. Rows that do not apply are omitted.
pub fn verify_inequality_suite<R: Rng + ?Sized>(
    p: &MastProblem,
    n_points: usize,
    rng: &mut R,
    limit: u128,
    consts: Option<SuiteConstants>,
) -> Result<InequalityReport> {
    let k = consts.unwrap_or_else(|| SuiteConstants::of(p));
    let loss = p.loss();
    let d = p.dim();
    let tilde = TildeObjective::new(p, limit)?;
    let support = tilde.support();
    let strongly = loss.strong_convexity() > 0.0;

    let mut points: Vec<Vec<f64>> = (0..n_points)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    points.push(vec![0.0; d]);
    points.push(p.shift().to_vec());
    let mut optima = None;
    if strongly {
        let x_star = solve_reference(&LossObjective(loss), p.shift(), SUITE_TOL_GRAD_SQ, REFERENCE_MAX_ITER)?;
        let x_d = solve_reference(&tilde, p.shift(), SUITE_TOL_GRAD_SQ, REFERENCE_MAX_ITER)?;
        points.push(x_star.x.clone());
        points.push(x_d.x.clone());
        optima = Some((x_star, x_d));
    }
    let f_inf = match (loss.lower_bound(), &optima) {
        (Some(v), _) => Some(v),
        (None, Some((xs, _))) => Some(xs.value),
        (None, None) => None,
    };

    let mut l1i = Tracker::new("sketch_smoothness");
    let mut l1ii = Tracker::new("tilde_smoothness");
    let mut l1iii = Tracker::new("tilde_upper_gap");
    let mut l2c = Tracker::new("tilde_convexity");
    let mut l2l = Tracker::new("tilde_dominates");
    let mut l3i = Tracker::new("sketch_strong_convexity");
    let mut l3ii = Tracker::new("tilde_strong_convexity");
    let mut l3iii = Tracker::new("tilde_lower_gap");
    let mut l4 = Tracker::new("second_moment");

    let n = points.len();
    for i in 0..n {
        let x = &points[i];
        let y = &points[(i + 1) % n];
        let h = linalg::sub(y, x);
        let hh = linalg::norm_sq(&h);
        let f_x = loss.value(x);
        let ft_x = tilde.value(x)?;
        let ft_y = tilde.value(y)?;
        let gt_x = tilde.gradient(x)?;
        let gt_y = tilde.gradient(y)?;
        let r2 = linalg::dist_sq(x, p.shift());

        let mut second_moment = 0.0;
        for (s, prob) in support {
            let (ls, ms) = (s.lambda_max(), s.lambda_min());
            let fs_x = p.sketched_value(s, x)?;
            let fs_y = p.sketched_value(s, y)?;
            let gs_x = p.estimator_gradient(s, x)?;
            let gs_y = p.estimator_gradient(s, y)?;
            let lin = fs_x + linalg::dot(&gs_x, &h);
            l1i.le(fs_y, lin + 0.5 * ls * k.l_f * hh, i);
            l1i.le(linalg::dist_sq(&gs_x, &gs_y).sqrt(), ls * k.l_f * hh.sqrt(), i);
            if strongly {
                l3i.le(lin + 0.5 * ms * k.mu_f * hh, fs_y, i);
            }
            second_moment += prob * linalg::norm_sq(&gs_x);
        }

        let lin = ft_x + linalg::dot(&gt_x, &h);
        l1ii.le(ft_y, lin + 0.5 * k.l_d * k.l_f * hh, i);
        l1ii.le(linalg::dist_sq(&gt_x, &gt_y).sqrt(), k.l_d * k.l_f * hh.sqrt(), i);
        l1iii.le(ft_x, f_x + 0.5 * (k.l_d - 1.0) * k.l_f * r2, i);
        if loss.is_convex() {
            l2c.le(lin, ft_y, i);
            l2l.le(f_x, ft_x, i);
        }
        if strongly {
            l3ii.le(lin + 0.5 * k.mu_d * k.mu_f * hh, ft_y, i);
            l3iii.le(f_x + 0.5 * (k.mu_d - 1.0) * k.mu_f * r2, ft_x, i);
        }
        if let Some(fi) = f_inf {
            l4.le(second_moment, 2.0 * k.l_f * k.l_s_max * (ft_x - fi), i);
        }
    }

    let mut rows = vec![l1i.row(), l1ii.row(), l1iii.row()];
    if loss.is_convex() {
        rows.push(l2c.row());
        rows.push(l2l.row());
    }
    if strongly {
        rows.push(l3i.row());
        rows.push(l3ii.row());
        rows.push(l3iii.row());
    }
    if f_inf.is_some() {
        rows.push(l4.row());
    }
    if let Some((xs, xd)) = optima {
        let mut t1 = Tracker::new("minimizer_sandwich");
        let f_xd = loss.value(&xd.x);
        let upper = xs.value + 0.5 * (k.l_d - 1.0) * k.l_f * linalg::dist_sq(&xs.x, p.shift())
            - 0.5 * (k.mu_d - 1.0) * k.mu_f * linalg::dist_sq(&xd.x, p.shift());
        t1.le(xs.value, f_xd, n - 2);
        t1.le(f_xd, upper, n - 1);
        rows.push(t1.row());
    }
    Ok(InequalityReport { rows, points })
}
