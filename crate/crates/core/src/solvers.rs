//! Single-node solvers for the sketched objective and their step-size rules.
//!
//! * Double sketched (S)GD: `x' = x - gamma g_S(x)` with a fresh sketch per step.
//! * Loopless variance-reduced double sketched gradient: an anchor `w` and
//!   anchor estimate `h_hat`, refreshed with probability `p`.
//! * Sketched probabilistic gradient estimator: a recursive estimator `h`
//!   that is reset from a large minibatch with probability `p` and otherwise
//!   corrected with a small minibatch of gradient differences.
//!
//! Every step draws from `rng::iteration(seed, t)` in a fixed order: sketch,
//! then coin, then minibatch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{AbcConstants, AbcEstimator, Loss, MastProblem};
use crate::rng::{self, Stream};
use crate::sketch::{SketchSample, SpectralConstants, DEFAULT_SUPPORT_LIMIT};

/// Iterates with a norm above this are treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Step-size choices from the convergence guarantees. Each returns the largest admissible
/// step of its rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSizeRule {
    /// `1 / (L_f L_S^max)`, strongly convex double sketched GD.
    StronglyConvex,
    /// `1 / (2 L_f L_S^max)`, convex double sketched GD.
    Convex,
    /// `1 / (L_f sqrt(L_D L_S^max T))`, nonconvex double sketched GD.
    Nonconvex { iterations: u64 },
    /// `min{1/(D sqrt(T)), eps^2 / (2 D^2 gap)}` with `D = L_f sqrt(L_D L_S^max)`
    /// and `gap = f~inf - f^inf`.
    EpsilonTarget { eps: f64, iterations: u64, gap: Option<f64> },
    /// `1 / sqrt(L_f L_D D_AB T)` with `D_AB = A + B L_f L_S^max`.
    Abc { iterations: u64, abc: AbcConstants },
    /// `1 / D_AB`, strongly convex inexact-gradient variant.
    AbcStronglyConvex { abc: AbcConstants },
    /// `1 / (2 D_AB)`, convex inexact-gradient variant.
    AbcConvex { abc: AbcConstants },
    /// `1 / (20 L_f L_S^max)`, variance-reduced method, strongly convex.
    Lsvrdsg,
    /// `1 / (40 L_f L_S^max)`, variance-reduced method, convex.
    LsvrdsgConvex,
    /// `1 / (L_f (L_D + sqrt((1-p)/(p b') L_S^max L_D)))`, probabilistic
    /// estimator method.
    SPage { prob: f64, small_batch: usize },
    Manual(f64),
}

fn d_ab(abc: &AbcConstants, l_f: f64, c: &SpectralConstants) -> f64 {
    abc.a + abc.b * l_f * c.l_s_max
}

/// Resolves a rule against the distribution and loss constants.
pub fn step_size(rule: StepSizeRule, c: SpectralConstants, loss: &dyn Loss) -> Result<f64> {
    let l_f = loss.smoothness();
    let t_of = |t: u64| -> Result<f64> {
        if t == 0 {
            Err(Error::Config("iteration count must be >= 1".into()))
        } else {
            Ok(t as f64)
        }
    };
    let gamma = match rule {
        StepSizeRule::StronglyConvex => 1.0 / (l_f * c.l_s_max),
        StepSizeRule::Convex => 1.0 / (2.0 * l_f * c.l_s_max),
        StepSizeRule::Nonconvex { iterations } => 1.0 / (l_f * (c.l_d * c.l_s_max * t_of(iterations)?).sqrt()),
        StepSizeRule::EpsilonTarget { eps, iterations, gap } => {
            let gap = gap.ok_or(Error::MissingConstant("f~inf - f^inf"))?;
            let d = l_f * (c.l_d * c.l_s_max).sqrt();
            let first = 1.0 / (d * t_of(iterations)?.sqrt());
            if gap > 0.0 {
                first.min(eps * eps / (2.0 * d * d * gap))
            } else {
                first
            }
        }
        StepSizeRule::Abc { iterations, abc } => {
            abc.c.ok_or(Error::MissingConstant("C"))?;
            1.0 / (l_f * c.l_d * d_ab(&abc, l_f, &c) * t_of(iterations)?).sqrt()
        }
        StepSizeRule::AbcStronglyConvex { abc } => 1.0 / d_ab(&abc, l_f, &c),
        StepSizeRule::AbcConvex { abc } => 1.0 / (2.0 * d_ab(&abc, l_f, &c)),
        StepSizeRule::Lsvrdsg => 1.0 / (20.0 * l_f * c.l_s_max),
        StepSizeRule::LsvrdsgConvex => 1.0 / (40.0 * l_f * c.l_s_max),
        StepSizeRule::SPage { prob, small_batch } => {
            if !(prob > 0.0 && prob <= 1.0) || small_batch == 0 {
                return Err(Error::Config(format!("need p in (0, 1] and b' >= 1, got p={prob}, b'={small_batch}")));
            }
            let ratio = (1.0 - prob) / (prob * small_batch as f64);
            1.0 / (l_f * (c.l_d + (ratio * c.l_s_max * c.l_d).sqrt()))
        }
        StepSizeRule::Manual(g) => g,
    };
    if gamma > 0.0 && gamma.is_finite() {
        Ok(gamma)
    } else {
        Err(Error::Config(format!("step size rule {rule:?} produced {gamma}")))
    }
}

/// Right-hand sides of the convergence guarantees, for checking runs.
pub mod bounds {
    use super::*;

    /// `(1 - gamma mu_D mu_f)^t r0 + 2 gamma L_f L_S^max gap / (mu_f mu_D)`
    pub fn strongly_convex(gamma: f64, l_f: f64, mu_f: f64, c: SpectralConstants, r0_sq: f64, gap: f64, t: u64) -> f64 {
        (1.0 - gamma * c.mu_d * mu_f).powf(t as f64) * r0_sq + neighborhood(gamma, l_f, mu_f, c, gap)
    }

    /// Stationary part of [`strongly_convex`].
    pub fn neighborhood(gamma: f64, l_f: f64, mu_f: f64, c: SpectralConstants, gap: f64) -> f64 {
        2.0 * gamma * l_f * c.l_s_max * gap / (mu_f * c.mu_d)
    }

    /// `3 delta0 / (gamma T) + gamma L_f^2 L_D L_S^max gap`
    pub fn nonconvex(gamma: f64, l_f: f64, c: SpectralConstants, t: u64, delta0: f64, gap: f64) -> f64 {
        3.0 * delta0 / (gamma * t as f64) + gamma * l_f * l_f * c.l_d * c.l_s_max * gap
    }

    /// `3 delta0 / (gamma T) + (gamma L_f L_D / 2)(C + 2 D_AB gap)`
    pub fn abc_nonconvex(gamma: f64, l_f: f64, c: SpectralConstants, abc: AbcConstants, t: u64, delta0: f64, gap: f64) -> Result<f64> {
        let cc = abc.c.ok_or(Error::MissingConstant("C"))?;
        Ok(3.0 * delta0 / (gamma * t as f64) + 0.5 * gamma * l_f * c.l_d * (cc + 2.0 * d_ab(&abc, l_f, &c) * gap))
    }

    /// Per-step contraction of the variance-reduced Lyapunov function,
    /// `min{gamma mu_D mu_f, p/2}`.
    pub fn lsvrdsg_rate(gamma: f64, mu_f: f64, c: SpectralConstants, prob: f64) -> f64 {
        (gamma * c.mu_d * mu_f).min(prob / 2.0)
    }

    /// `(1 - rho)^t psi0 + 8 gamma^2 L_f L_S^max (N - b) gap / (rho max{1, N-1} b)`
    #[allow(clippy::too_many_arguments)]
    pub fn lsvrdsg(gamma: f64, l_f: f64, mu_f: f64, c: SpectralConstants, prob: f64, n: usize, b: usize, psi0: f64, gap: f64, t: u64) -> f64 {
        let rho = lsvrdsg_rate(gamma, mu_f, c, prob);
        let tail = 8.0 * gamma * gamma * l_f * c.l_s_max * (n - b) as f64 / (rho * (n.max(2) - 1) as f64 * b as f64) * gap;
        (1.0 - rho).powf(t as f64) * psi0 + tail
    }

    /// `2 psi0 / (gamma T) + (N - b) / ((N - 1) b) sigma2`
    pub fn spage(gamma: f64, t: u64, psi0: f64, n: usize, b: usize, sigma2: f64) -> f64 {
        let frac = if n > 1 { (n - b) as f64 / ((n - 1) as f64 * b as f64) } else { 0.0 };
        2.0 * psi0 / (gamma * t as f64) + frac * sigma2
    }
}

/// The support of a uniform finite sketch distribution, in enumeration order.
#[derive(Debug, Clone)]
pub struct UniformSupport {
    sketches: Vec<SketchSample>,
}

impl UniformSupport {
    pub fn new(p: &MastProblem, limit: u128) -> Result<Self> {
        if !p.dist().is_uniform() {
            return Err(Error::Unsupported("variance-reduced methods need a uniform sketch distribution".into()));
        }
        Ok(Self { sketches: p.dist().enumerate_support(limit)?.into_iter().map(|(s, _)| s).collect() })
    }

    pub fn len(&self) -> usize {
        self.sketches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sketches.is_empty()
    }

    pub fn get(&self, i: usize) -> &SketchSample {
        &self.sketches[i]
    }

    /// `(1/|idx|) sum_{i in idx} grad f_{S_i}(x)`, summed in the given order.
    pub fn minibatch_mean(&self, p: &MastProblem, idx: &[usize], x: &[f64]) -> Result<Vec<f64>> {
        if idx.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut acc = vec![0.0; x.len()];
        for &i in idx {
            linalg::axpy(1.0, &p.estimator_gradient(&self.sketches[i], x)?, &mut acc);
        }
        linalg::scale(1.0 / idx.len() as f64, &mut acc);
        Ok(acc)
    }

    /// `(1/|idx|) sum_{i in idx} (grad f_{S_i}(x_new) - grad f_{S_i}(x_old))`
    pub fn minibatch_difference(&self, p: &MastProblem, idx: &[usize], x_new: &[f64], x_old: &[f64]) -> Result<Vec<f64>> {
        if idx.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut acc = vec![0.0; x_new.len()];
        for &i in idx {
            let s = &self.sketches[i];
            linalg::axpy(1.0, &p.estimator_gradient(s, x_new)?, &mut acc);
            linalg::axpy(-1.0, &p.estimator_gradient(s, x_old)?, &mut acc);
        }
        linalg::scale(1.0 / idx.len() as f64, &mut acc);
        Ok(acc)
    }

    /// `b` distinct indices drawn uniformly, sorted.
    pub fn draw<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<usize>> {
        if b == 0 || b > self.len() {
            return Err(Error::Config(format!("minibatch {b} outside 1..={}", self.len())));
        }
        let mut idx = rand::seq::index::sample(rng, self.len(), b).into_vec();
        idx.sort_unstable();
        Ok(idx)
    }
}

/// Anchor of the variance-reduced method.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub w: Vec<f64>,
    pub h_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: Vec<f64>,
    pub t: u64,
    /// Variance-reduced anchor.
    pub anchor: Option<Anchor>,
    /// Recursive estimator of the probabilistic method.
    pub estimator: Option<Vec<f64>>,
}

impl SolverState {
    pub fn new(x0: Vec<f64>) -> Self {
        Self { x: x0, t: 0, anchor: None, estimator: None }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("step size {gamma} must be finite and >= 0")))
    }
}

fn check_prob(prob: f64) -> Result<()> {
    if (0.0..=1.0).contains(&prob) {
        Ok(())
    } else {
        Err(Error::Config(format!("probability {prob} outside [0, 1]")))
    }
}

/// `x - gamma h`, failing on non-finite or huge iterates.
fn advance(x: &[f64], gamma: f64, h: &[f64], t_next: u64) -> Result<Vec<f64>> {
    let mut next = x.to_vec();
    linalg::axpy(-gamma, h, &mut next);
    let norm = linalg::norm_sq(&next).sqrt();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Divergence { t: t_next, norm });
    }
    Ok(next)
}

/// One double sketched (S)GD step. With [`AbcEstimator::Exact`] the step uses
/// the exact sketched gradient.
pub fn dsgd_step<R: Rng + ?Sized>(p: &MastProblem, st: &SolverState, gamma: f64, estimator: &AbcEstimator, rng: &mut R) -> Result<SolverState> {
    check_gamma(gamma)?;
    let s = p.dist().sample(rng);
    let g = estimator.inner_estimate(p, &s, &st.x, rng)?;
    Ok(SolverState { x: advance(&st.x, gamma, &g, st.t + 1)?, t: st.t + 1, anchor: None, estimator: None })
}

/// Anchor at `x0` with a `b`-minibatch estimate.
pub fn lsvrdsg_init<R: Rng + ?Sized>(p: &MastProblem, support: &UniformSupport, x0: Vec<f64>, batch: usize, rng: &mut R) -> Result<SolverState> {
    let idx = support.draw(batch, rng)?;
    let h_hat = support.minibatch_mean(p, &idx, &x0)?;
    Ok(SolverState { anchor: Some(Anchor { w: x0.clone(), h_hat }), ..SolverState::new(x0) })
}

/// Variance-reduced estimate `grad f_S(x) - grad f_S(w) + h_hat`.
pub fn lsvrdsg_estimate(p: &MastProblem, s: &SketchSample, x: &[f64], anchor: &Anchor) -> Result<Vec<f64>> {
    let mut h = p.estimator_gradient(s, x)?;
    linalg::axpy(-1.0, &p.estimator_gradient(s, &anchor.w)?, &mut h);
    linalg::axpy(1.0, &anchor.h_hat, &mut h);
    Ok(h)
}

/// One variance-reduced step. On a refresh the anchor moves to the current
/// iterate (before the step).
pub fn lsvrdsg_step<R: Rng + ?Sized>(
    p: &MastProblem,
    support: &UniformSupport,
    st: &SolverState,
    gamma: f64,
    prob: f64,
    batch: usize,
    rng: &mut R,
) -> Result<SolverState> {
    check_gamma(gamma)?;
    check_prob(prob)?;
    if batch == 0 || batch > support.len() {
        return Err(Error::Config(format!("minibatch {batch} outside 1..={}", support.len())));
    }
    let anchor = st.anchor.as_ref().ok_or_else(|| Error::Config("state has no anchor; call lsvrdsg_init".into()))?;
    let s = support.get(rng.gen_range(0..support.len()));
    let h = lsvrdsg_estimate(p, s, &st.x, anchor)?;
    let x = advance(&st.x, gamma, &h, st.t + 1)?;
    let anchor = if rng.gen::<f64>() < prob {
        let idx = support.draw(batch, rng)?;
        Anchor { w: st.x.clone(), h_hat: support.minibatch_mean(p, &idx, &st.x)? }
    } else {
        anchor.clone()
    };
    Ok(SolverState { x, t: st.t + 1, anchor: Some(anchor), estimator: None })
}

/// Estimator `h^0` from a `b`-minibatch at `x0`.
pub fn spage_init<R: Rng + ?Sized>(p: &MastProblem, support: &UniformSupport, x0: Vec<f64>, batch: usize, rng: &mut R) -> Result<SolverState> {
    let idx = support.draw(batch, rng)?;
    let h = support.minibatch_mean(p, &idx, &x0)?;
    Ok(SolverState { estimator: Some(h), ..SolverState::new(x0) })
}

/// One step of the probabilistic estimator method.
#[allow(clippy::too_many_arguments)]
pub fn spage_step<R: Rng + ?Sized>(
    p: &MastProblem,
    support: &UniformSupport,
    st: &SolverState,
    gamma: f64,
    prob: f64,
    batch: usize,
    small_batch: usize,
    rng: &mut R,
) -> Result<SolverState> {
    check_gamma(gamma)?;
    check_prob(prob)?;
    let h = st.estimator.as_ref().ok_or_else(|| Error::Config("state has no estimator; call spage_init".into()))?;
    let x = advance(&st.x, gamma, h, st.t + 1)?;
    let next_h = if rng.gen::<f64>() < prob {
        let idx = support.draw(batch, rng)?;
        support.minibatch_mean(p, &idx, &x)?
    } else {
        let idx = support.draw(small_batch, rng)?;
        let mut h = h.clone();
        linalg::axpy(1.0, &support.minibatch_difference(p, &idx, &x, &st.x)?, &mut h);
        h
    };
    Ok(SolverState { x, t: st.t + 1, anchor: None, estimator: Some(next_h) })
}

/// `|x - x_D*|^2 + 16 gamma^2 / (p N) sum_i |grad f_{S_i}(w) - grad f_{S_i}(x_D*)|^2`
pub fn lsvrdsg_lyapunov(p: &MastProblem, support: &UniformSupport, st: &SolverState, x_d_star: &[f64], gamma: f64, prob: f64) -> Result<f64> {
    let anchor = st.anchor.as_ref().ok_or_else(|| Error::Config("state has no anchor".into()))?;
    let mut acc = 0.0;
    for i in 0..support.len() {
        let s = support.get(i);
        acc += linalg::dist_sq(&p.estimator_gradient(s, &anchor.w)?, &p.estimator_gradient(s, x_d_star)?);
    }
    Ok(linalg::dist_sq(&st.x, x_d_star) + 16.0 * gamma * gamma / (prob * support.len() as f64) * acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Dsgd { estimator: AbcEstimator },
    Lsvrdsg { prob: f64, batch: usize },
    SPage { prob: f64, batch: usize, small_batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub gamma: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Cap on enumerated support size for the variance-reduced methods.
    pub support_limit: u128,
}

impl SolverConfig {
    pub fn new(method: Method, gamma: f64, iterations: u64, seed: u64) -> Self {
        Self { method, gamma, iterations, seed, support_limit: DEFAULT_SUPPORT_LIMIT }
    }
}

/// A solver bound to a problem, stepping one iteration at a time.
#[derive(Debug, Clone)]
pub struct Solver<'a> {
    problem: &'a MastProblem,
    cfg: SolverConfig,
    support: Option<UniformSupport>,
    state: SolverState,
}

impl<'a> Solver<'a> {
    pub fn new(problem: &'a MastProblem, cfg: SolverConfig, x0: Vec<f64>) -> Result<Self> {
        crate::error::check_dim(problem.dim(), x0.len())?;
        check_gamma(cfg.gamma)?;
        let mut init = rng::derive(cfg.seed, &[rng::tag::INIT]);
        let (support, state) = match cfg.method {
            Method::Dsgd { .. } => (None, SolverState::new(x0)),
            Method::Lsvrdsg { prob, batch } => {
                if !(prob > 0.0 && prob <= 1.0) {
                    return Err(Error::Config(format!("probability {prob} outside (0, 1]")));
                }
                let sup = UniformSupport::new(problem, cfg.support_limit)?;
                let st = lsvrdsg_init(problem, &sup, x0, batch, &mut init)?;
                (Some(sup), st)
            }
            Method::SPage { prob, batch, small_batch } => {
                if !(prob > 0.0 && prob <= 1.0) {
                    return Err(Error::Config(format!("probability {prob} outside (0, 1]")));
                }
                let sup = UniformSupport::new(problem, cfg.support_limit)?;
                if small_batch == 0 || small_batch > batch || batch > sup.len() {
                    return Err(Error::Config(format!("need 1 <= b' <= b <= N, got b'={small_batch}, b={batch}, N={}", sup.len())));
                }
                let st = spage_init(problem, &sup, x0, batch, &mut init)?;
                (Some(sup), st)
            }
        };
        Ok(Self { problem, cfg, support, state })
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn support(&self) -> Option<&UniformSupport> {
        self.support.as_ref()
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn step(&mut self) -> Result<()> {
        let mut r: Stream = rng::iteration(self.cfg.seed, self.state.t);
        let (p, st, g) = (self.problem, &self.state, self.cfg.gamma);
        self.state = match (self.cfg.method, &self.support) {
            (Method::Dsgd { estimator }, _) => dsgd_step(p, st, g, &estimator, &mut r)?,
            (Method::Lsvrdsg { prob, batch }, Some(sup)) => lsvrdsg_step(p, sup, st, g, prob, batch, &mut r)?,
            (Method::SPage { prob, batch, small_batch }, Some(sup)) => spage_step(p, sup, st, g, prob, batch, small_batch, &mut r)?,
            _ => unreachable!("support is built with the solver"),
        };
        Ok(())
    }
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub state: SolverState,
    /// Iteration and iterate norm at which divergence was detected.
    pub diverged: Option<(u64, f64)>,
}

/// Runs `cfg.iterations` steps from `x0`, calling `observe` on the initial
/// state and after every step. Divergence ends the run and is reported in
/// the outcome rather than as an error.
pub fn run(
    problem: &MastProblem,
    cfg: SolverConfig,
    x0: Vec<f64>,
    mut observe: impl FnMut(&Solver<'_>) -> Result<()>,
) -> Result<RunOutcome> {
    let mut solver = Solver::new(problem, cfg, x0)?;
    observe(&solver)?;
    for _ in 0..cfg.iterations {
        match solver.step() {
            Ok(()) => observe(&solver)?,
            Err(Error::Divergence { t, norm }) => {
                return Ok(RunOutcome { state: solver.state, diverged: Some((t, norm)) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RunOutcome { state: solver.state, diverged: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::QuadraticLoss;
    use crate::oracle::{self, SmoothObjective, TildeObjective};
    use crate::sketch::SketchDistribution;
    use std::sync::Arc;

    fn isotropic(d: usize) -> QuadraticLoss {
        QuadraticLoss::isotropic(vec![0.0; d], 0.0).unwrap()
    }

    fn problem(dist: SketchDistribution, center: Vec<f64>, shift: Vec<f64>) -> MastProblem {
        let q = QuadraticLoss::diagonal((0..center.len()).map(|i| 1.0 + i as f64 * 0.5).collect(), center, 0.0).unwrap();
        MastProblem::new(Arc::new(q), dist, shift).unwrap()
    }

    #[test]
    fn step_size_examples() {
        let q = isotropic(2);
        let c = SpectralConstants { l_d: 2.0, mu_d: 2.0, l_s_max: 4.0 };
        assert_eq!(step_size(StepSizeRule::StronglyConvex, c, &q).unwrap(), 0.25);
        assert_eq!(step_size(StepSizeRule::Lsvrdsg, c, &q).unwrap(), 1.0 / 80.0);
        assert_eq!(step_size(StepSizeRule::LsvrdsgConvex, c, &q).unwrap(), 1.0 / 160.0);
        assert_eq!(step_size(StepSizeRule::Convex, c, &q).unwrap(), 0.125);
        let id = SpectralConstants::IDENTITY;
        assert!((step_size(StepSizeRule::Nonconvex { iterations: 100 }, id, &q).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(step_size(StepSizeRule::Manual(0.3), id, &q).unwrap(), 0.3);
        assert!(step_size(StepSizeRule::Manual(0.0), id, &q).is_err());
    }

    #[test]
    fn missing_constants_are_named() {
        let q = isotropic(2);
        let id = SpectralConstants::IDENTITY;
        let e = step_size(StepSizeRule::EpsilonTarget { eps: 0.1, iterations: 10, gap: None }, id, &q).unwrap_err();
        assert_eq!(e, Error::MissingConstant("f~inf - f^inf"));
        let abc = AbcConstants { a: 1.0, b: 0.0, c: None };
        let e = step_size(StepSizeRule::Abc { iterations: 10, abc }, id, &q).unwrap_err();
        assert_eq!(e, Error::MissingConstant("C"));
    }

    #[test]
    fn exact_abc_reduces_to_nonconvex() {
        let q = QuadraticLoss::diagonal(vec![3.0, 1.0], vec![0.0; 2], 0.0).unwrap();
        let c = SpectralConstants { l_d: 2.5, mu_d: 2.0, l_s_max: 6.25 };
        let abc = AbcConstants { a: 0.0, b: 1.0, c: Some(0.0) };
        let g3 = step_size(StepSizeRule::Nonconvex { iterations: 1000 }, c, &q).unwrap();
        let g4 = step_size(StepSizeRule::Abc { iterations: 1000, abc }, c, &q).unwrap();
        assert!((g3 - g4).abs() <= 1e-15 * g3);
        let b3 = bounds::nonconvex(g3, 3.0, c, 1000, 1.7, 0.4);
        let b4 = bounds::abc_nonconvex(g3, 3.0, c, abc, 1000, 1.7, 0.4).unwrap();
        assert!((b3 - b4).abs() <= 1e-12 * b3);
    }

    #[test]
    fn epsilon_target_rule() {
        let q = isotropic(2);
        let c = SpectralConstants { l_d: 4.0, mu_d: 4.0, l_s_max: 16.0 };
        // D = 8
        let g = step_size(StepSizeRule::EpsilonTarget { eps: 1.0, iterations: 4, gap: Some(1.0) }, c, &q).unwrap();
        assert_eq!(g, (1.0f64 / 16.0).min(1.0 / 128.0));
    }

    #[test]
    fn spage_rule_at_full_probability() {
        let q = isotropic(2);
        let c = SpectralConstants { l_d: 2.0, mu_d: 2.0, l_s_max: 4.0 };
        assert_eq!(step_size(StepSizeRule::SPage { prob: 1.0, small_batch: 1 }, c, &q).unwrap(), 0.5);
        assert_eq!(step_size(StepSizeRule::SPage { prob: 0.5, small_batch: 2 }, c, &q).unwrap(), 0.25);
        let g = step_size(StepSizeRule::SPage { prob: 0.2, small_batch: 1 }, c, &q).unwrap();
        assert!((g - 1.0 / (2.0 + 32.0f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn dsgd_step_example() {
        let p = MastProblem::unshifted(Arc::new(isotropic(2)), SketchDistribution::finite_set(vec![
            SketchSample::from_diagonal(&[2.0, 0.0]).unwrap(),
            SketchSample::from_diagonal(&[0.0, 2.0]).unwrap(),
        ]).unwrap()).unwrap();
        // find a seed drawing the first member
        let st = SolverState::new(vec![1.0, 1.0]);
        let mut hit = false;
        for seed in 0..20 {
            let next = dsgd_step(&p, &st, 0.1, &AbcEstimator::Exact, &mut rng::iteration(seed, 0)).unwrap();
            if next.x[1] == 1.0 {
                assert!((next.x[0] - 0.6).abs() < 1e-15);
                hit = true;
            }
        }
        assert!(hit);
        let same = dsgd_step(&p, &st, 0.0, &AbcEstimator::Exact, &mut rng::iteration(0, 0)).unwrap();
        assert_eq!(same.x, st.x);
    }

    #[test]
    fn dsgd_identity_is_gradient_descent() {
        let p = problem(SketchDistribution::identity(3).unwrap(), vec![1.0, 2.0, 3.0], vec![0.0; 3]);
        let cfg = SolverConfig::new(Method::Dsgd { estimator: AbcEstimator::Exact }, 0.2, 30, 1);
        let mut xs = Vec::new();
        run(&p, cfg, vec![0.0; 3], |s| {
            xs.push(s.state().x.clone());
            Ok(())
        })
        .unwrap();
        let gd = oracle::gd_trajectory(&oracle::LossObjective(p.loss()), &[0.0; 3], 0.2, 30).unwrap();
        assert_eq!(xs, gd);
    }

    #[test]
    fn isotropic_closed_form_trajectory() {
        let p = MastProblem::unshifted(Arc::new(QuadraticLoss::diagonal(vec![0.5; 3], vec![0.0; 3], 0.0).unwrap()), SketchDistribution::identity(3).unwrap()).unwrap();
        let x0 = vec![1.0, -2.0, 4.0];
        let cfg = SolverConfig::new(Method::Dsgd { estimator: AbcEstimator::Exact }, 0.3, 50, 0);
        let mut ok = true;
        run(&p, cfg, x0.clone(), |s| {
            let f = (1.0f64 - 0.3 * 0.5).powi(s.state().t as i32);
            for k in 0..3 {
                ok &= (s.state().x[k] - f * x0[k]).abs() <= 1e-12;
            }
            Ok(())
        })
        .unwrap();
        assert!(ok);
    }

    #[test]
    fn zero_iterations_observes_initial_point() {
        let p = problem(SketchDistribution::rand_k(3, 1).unwrap(), vec![1.0; 3], vec![0.0; 3]);
        let mut n = 0;
        let out = run(&p, SolverConfig::new(Method::Dsgd { estimator: AbcEstimator::Exact }, 0.1, 0, 0), vec![5.0; 3], |_| {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((n, out.state.x, out.diverged), (1, vec![5.0; 3], None));
    }

    #[test]
    fn divergence_is_recorded() {
        let p = problem(SketchDistribution::rand_k(3, 1).unwrap(), vec![1.0; 3], vec![0.0; 3]);
        let cfg = SolverConfig::new(Method::Dsgd { estimator: AbcEstimator::Exact }, 10.0, 10_000, 0);
        let out = run(&p, cfg, vec![1.0; 3], |_| Ok(())).unwrap();
        let (t, norm) = out.diverged.unwrap();
        assert!(t < 10_000 && !(norm <= DIVERGENCE_NORM));
    }

    #[test]
    fn replay_is_bitwise() {
        let p = problem(SketchDistribution::rand_k(4, 2).unwrap(), vec![1.0, -1.0, 0.5, 2.0], vec![0.1; 4]);
        for method in [
            Method::Dsgd { estimator: AbcEstimator::Exact },
            Method::Lsvrdsg { prob: 0.3, batch: 2 },
            Method::SPage { prob: 0.3, batch: 3, small_batch: 1 },
        ] {
            let go = || {
                let mut v = Vec::new();
                run(&p, SolverConfig::new(method, 0.05, 40, 9), vec![0.0; 4], |s| {
                    v.push(s.state().x.clone());
                    Ok(())
                })
                .unwrap();
                v
            };
            assert_eq!(go(), go());
        }
    }

    #[test]
    fn full_anchor_gives_exact_gradient() {
        let p = problem(SketchDistribution::rand_k(4, 2).unwrap(), vec![1.0, -1.0, 0.5, 2.0], vec![0.3, 0.0, -0.2, 1.0]);
        let sup = UniformSupport::new(&p, 100).unwrap();
        let x = vec![0.4, 1.0, -2.0, 0.7];
        let st = lsvrdsg_init(&p, &sup, x.clone(), sup.len(), &mut rng::derive(0, &[])).unwrap();
        let exact = p.exact_tilde_gradient(&x, 100).unwrap();
        assert_eq!(st.anchor.as_ref().unwrap().h_hat, exact);
        // with w = x the correction cancels for every sketch
        for i in 0..sup.len() {
            let h = lsvrdsg_estimate(&p, sup.get(i), &x, st.anchor.as_ref().unwrap()).unwrap();
            for k in 0..4 {
                assert!((h[k] - exact[k]).abs() <= 1e-15 * (1.0 + exact[k].abs()));
            }
        }
    }

    #[test]
    fn variance_reduced_estimate_is_unbiased() {
        let p = problem(SketchDistribution::rand_k(4, 2).unwrap(), vec![1.0, -1.0, 0.5, 2.0], vec![0.3, 0.0, -0.2, 1.0]);
        let sup = UniformSupport::new(&p, 100).unwrap();
        let w = vec![-1.0, 0.5, 0.2, 0.0];
        let st = lsvrdsg_init(&p, &sup, w, sup.len(), &mut rng::derive(0, &[])).unwrap();
        let x = vec![0.4, 1.0, -2.0, 0.7];
        let mut mean = vec![0.0; 4];
        for i in 0..sup.len() {
            linalg::axpy(1.0 / sup.len() as f64, &lsvrdsg_estimate(&p, sup.get(i), &x, st.anchor.as_ref().unwrap()).unwrap(), &mut mean);
        }
        let exact = p.exact_tilde_gradient(&x, 100).unwrap();
        for k in 0..4 {
            assert!((mean[k] - exact[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_sketch_lsvrdsg_is_gradient_descent() {
        let p = problem(SketchDistribution::identity(3).unwrap(), vec![1.0, -1.0, 0.5], vec![0.0; 3]);
        let obj = TildeObjective::new(&p, 100).unwrap();
        let gd = oracle::gd_trajectory(&obj, &[2.0, 2.0, 2.0], 0.05, 25).unwrap();
        let mut xs = Vec::new();
        run(&p, SolverConfig::new(Method::Lsvrdsg { prob: 0.5, batch: 1 }, 0.05, 25, 4), vec![2.0; 3], |s| {
            xs.push(s.state().x.clone());
            Ok(())
        })
        .unwrap();
        for (a, b) in xs.iter().zip(&gd) {
            assert!(linalg::dist_sq(a, b) < 1e-26);
        }
    }

    #[test]
    fn spage_full_probability_is_bitwise_gradient_descent() {
        let p = problem(SketchDistribution::rand_k(4, 2).unwrap(), vec![1.0, -1.0, 0.5, 2.0], vec![0.1; 4]);
        let obj = TildeObjective::new(&p, 100).unwrap();
        let gamma = 1.0 / obj.smoothness();
        let gd = oracle::gd_trajectory(&obj, &[0.0; 4], gamma, 60).unwrap();
        let mut xs = Vec::new();
        run(&p, SolverConfig::new(Method::SPage { prob: 1.0, batch: 6, small_batch: 1 }, gamma, 60, 2), vec![0.0; 4], |s| {
            xs.push(s.state().x.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(xs, gd);
    }

    #[test]
    fn spage_without_refresh_accumulates_differences() {
        let p = problem(SketchDistribution::rand_k(4, 2).unwrap(), vec![1.0, -1.0, 0.5, 2.0], vec![0.1; 4]);
        let sup = UniformSupport::new(&p, 100).unwrap();
        let mut st = spage_init(&p, &sup, vec![0.0; 4], 3, &mut rng::derive(5, &[])).unwrap();
        let h0 = st.estimator.clone().unwrap();
        let mut drift = vec![0.0; 4];
        for t in 0..15 {
            let mut r = rng::iteration(5, t);
            let next = spage_step(&p, &sup, &st, 0.05, 0.0, 3, 3, &mut r).unwrap();
            // replay the minibatch draw: coin first, then indices
            let mut r = rng::iteration(5, t);
            let _coin: f64 = r.gen();
            let idx = sup.draw(3, &mut r).unwrap();
            linalg::axpy(1.0, &sup.minibatch_difference(&p, &idx, &next.x, &st.x).unwrap(), &mut drift);
            st = next;
        }
        let h = st.estimator.unwrap();
        for k in 0..4 {
            assert!((h[k] - h0[k] - drift[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn config_errors() {
        let p = problem(SketchDistribution::rand_k(3, 1).unwrap(), vec![1.0; 3], vec![0.0; 3]);
        let bad = [
            Method::Lsvrdsg { prob: 0.5, batch: 4 },
            Method::Lsvrdsg { prob: 0.0, batch: 1 },
            Method::SPage { prob: 0.5, batch: 2, small_batch: 3 },
            Method::SPage { prob: 0.5, batch: 4, small_batch: 1 },
        ];
        for m in bad {
            assert!(matches!(Solver::new(&p, SolverConfig::new(m, 0.1, 1, 0), vec![0.0; 3]), Err(Error::Config(_))), "{m:?}");
        }
        let nonuniform = problem(SketchDistribution::bernoulli(vec![0.3, 0.5, 0.5]).unwrap(), vec![1.0; 3], vec![0.0; 3]);
        assert!(matches!(
            Solver::new(&nonuniform, SolverConfig::new(Method::Lsvrdsg { prob: 0.5, batch: 1 }, 0.1, 1, 0), vec![0.0; 3]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn interpolation_converges_linearly() {
        // center at the shift: both minima coincide at s
        let c = vec![1.0, -2.0, 0.5, 3.0];
        let p = problem(SketchDistribution::rand_k(4, 1).unwrap(), c.clone(), c.clone());
        let k = p.constants();
        let (l_f, mu_f) = (p.loss().smoothness(), p.loss().strong_convexity());
        let gamma = step_size(StepSizeRule::StronglyConvex, k, p.loss()).unwrap();
        let x0 = vec![0.0; 4];
        let r0 = linalg::dist_sq(&x0, &c);
        let t = ((r0 / 1e-10).ln() / (gamma * k.mu_d * mu_f)).ceil() as u64;
        assert!(l_f > 0.0);
        let out = run(&p, SolverConfig::new(Method::Dsgd { estimator: AbcEstimator::Exact }, gamma, t, 3), x0, |_| Ok(())).unwrap();
        assert!(linalg::dist_sq(&out.state.x, &c) <= 1e-10);
    }
}
