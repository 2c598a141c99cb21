//! The verification battery. Each check builds its own small problem, runs
//! it and compares against an exact oracle or a convergence bound, within a
//! runtime budget.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use mast_core::distributed::{self, Cluster, ClusterObjective, DistributedConfig, DistributedRule};
use mast_core::linalg;
use mast_core::objective::{AbcEstimator, LogisticLoss, Loss, MastProblem, QuadraticLoss};
use mast_core::oracle::{self, LossObjective, SmoothObjective, SuiteConstants, TildeObjective, REFERENCE_MAX_ITER, VIOLATION_TOL};
use mast_core::rng;
use mast_core::sketch::SketchDistribution;
use mast_core::solvers::{self, bounds, Method, Solver, SolverConfig, StepSizeRule};

use crate::config::{Axis, ExperimentConfig};
use crate::error::{BenchError, Result};
use crate::experiment::{self, quantiles, Recording};
use crate::fixtures::{gaussian, toy_data, toy_logistic, toy_nonconvex, toy_quadratic};
use crate::output::{self, cell_status, summarize, CellStatus};

/// Slack on expectation bounds checked with few seeds.
pub const SLACK: f64 = 1.2;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ENUM_LIMIT: u128 = 10_000;

/// Deliberate corruption used to show that the battery can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Halves `L_f` in the inequality suite.
    HalvedSmoothness,
}

impl std::str::FromStr for Fault {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "halve-lf" => Ok(Self::HalvedSmoothness),
            _ => Err(BenchError::Config(format!("unknown fault {s:?}; expected halve-lf"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub fault: Option<Fault>,
    /// Where the determinism check writes its two output trees.
    pub scratch: PathBuf,
}

/// What a check found, before timing.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

pub struct Check {
    pub id: &'static str,
    pub summary: &'static str,
    /// Wall-clock limit in seconds; exceeding it fails the check.
    pub budget: Option<f64>,
    run: fn(&CheckOptions) -> Result<Outcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub id: &'static str,
    pub passed: bool,
    pub seconds: f64,
    pub budget: Option<f64>,
    pub detail: String,
}

pub fn registry() -> Vec<Check> {
    vec![
        Check { id: "sketch_moments", summary: "sketches are unbiased with the closed-form second moment", budget: Some(5.0), run: sketch_moments },
        Check { id: "estimator_unbiased", summary: "averaged sketch gradients equal the gradient of the sketched objective", budget: Some(5.0), run: estimator_unbiased },
        Check { id: "inequality_suite", summary: "smoothness, convexity and second-moment inequalities hold; a corrupted constant is caught", budget: Some(30.0), run: inequality_suite },
        Check { id: "strongly_convex_dsgd", summary: "double sketched GD converges linearly under interpolation and stays in its neighborhood otherwise", budget: Some(10.0), run: strongly_convex_dsgd },
        Check { id: "variance_reduced_linear", summary: "the variance-reduced method converges linearly and contracts its Lyapunov function", budget: Some(20.0), run: variance_reduced_linear },
        Check { id: "gradient_envelopes", summary: "minimum gradient norms respect the nonconvex, inexact-gradient and distributed bounds", budget: Some(60.0), run: gradient_envelopes },
        Check { id: "probabilistic_estimator", summary: "the probabilistic estimator reduces to GD and respects its nonconvex bound", budget: Some(30.0), run: probabilistic_estimator },
        Check { id: "gamma_sweep", summary: "the theory step decreases the sketched loss monotonically; 50x that step does not", budget: Some(120.0), run: gamma_sweep },
        Check { id: "robustness", summary: "sketch-trained models keep more accuracy under sparsification than the plain minimizer", budget: Some(120.0), run: robustness_study },
        Check { id: "determinism", summary: "run, sweep and robustness outputs are byte-identical across reruns", budget: None, run: determinism },
    ]
}

pub fn run_check(c: &Check, opts: &CheckOptions) -> CheckResult {
    let start = Instant::now();
    let out = (c.run)(opts);
    let seconds = start.elapsed().as_secs_f64();
    let (mut passed, mut detail) = match out {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(b) = c.budget {
        if seconds > b {
            passed = false;
            detail = format!("{detail}; took {seconds:.1}s, budget {b}s");
        }
    }
    CheckResult { id: c.id, passed, seconds, budget: c.budget, detail }
}

/// Checks whose id contains `filter`, in registry order.
pub fn run_checks(filter: Option<&str>, opts: &CheckOptions, mut each: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    registry()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.id.contains(f)))
        .map(|c| {
            let r = run_check(c, opts);
            each(&r);
            r
        })
        .collect()
}

pub fn report_line(r: &CheckResult) -> String {
    format!("[{}] {:<24} {:>7.2}s  {}", if r.passed { "PASS" } else { "FAIL" }, r.id, r.seconds, r.detail)
}

pub fn report_csv(results: &[CheckResult]) -> String {
    let mut s = format!("# mast-bench {}\nid,passed,seconds,budget_seconds,detail\n", output::VERSION);
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{:.3},{},\"{}\"",
            r.id,
            u8::from(r.passed),
            r.seconds,
            r.budget.map(|b| b.to_string()).unwrap_or_default(),
            r.detail.replace('"', "'")
        );
    }
    s
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn sketch_moments(_: &CheckOptions) -> Result<Outcome> {
    let n = 100_000usize;
    let mut worst_sigma = 0.0f64;
    let dists = [SketchDistribution::bernoulli_uniform(10, 0.5)?, SketchDistribution::rand_k(10, 3)?];
    for (k, dist) in dists.iter().enumerate() {
        let d = dist.dim();
        let mut r = rng::derive(2024, &[rng::tag::FIXTURE, k as u64]);
        let (mut m1, mut m2) = (vec![0.0; d], vec![0.0; d]);
        for _ in 0..n {
            for &(i, v) in dist.sample(&mut r).entries() {
                m1[i] += v;
                m2[i] += v * v;
            }
        }
        // S_ii is 1/pi with probability pi: E S^2 = 1/pi and E S^4 = 1/pi^3.
        for (i, &e2) in dist.second_moment_diagonal().iter().enumerate() {
            let sd1 = ((e2 - 1.0) / n as f64).sqrt();
            let sd2 = ((e2 * e2 * e2 - e2 * e2) / n as f64).sqrt();
            worst_sigma = worst_sigma.max((m1[i] / n as f64 - 1.0).abs() / sd1).max((m2[i] / n as f64 - e2).abs() / sd2);
        }
    }
    let mut worst_exact = 0.0f64;
    for d in 1..=8usize {
        let mut ds = vec![
            SketchDistribution::bernoulli_uniform(d, 0.5)?,
            SketchDistribution::bernoulli((0..d).map(|i| 0.15 + 0.1 * i as f64).collect())?,
        ];
        for k in 1..=d {
            ds.push(SketchDistribution::rand_k(d, k)?);
        }
        for dist in &ds {
            let (mut m1, mut m2, mut total) = (vec![0.0; d], vec![0.0; d], 0.0);
            for (s, p) in dist.enumerate_support(ENUM_LIMIT)? {
                total += p;
                for (i, v) in s.diagonal().into_iter().enumerate() {
                    m1[i] += p * v;
                    m2[i] += p * v * v;
                }
            }
            worst_exact = worst_exact.max((total - 1.0).abs());
            for (i, e2) in dist.second_moment_diagonal().into_iter().enumerate() {
                worst_exact = worst_exact.max((m1[i] - 1.0).abs()).max((m2[i] - e2).abs() / e2);
            }
        }
    }
    outcome(
        worst_sigma <= 4.0 && worst_exact <= 1e-12,
        format!("sampled worst deviation {worst_sigma:.2} sigma (limit 4); enumerated worst error {worst_exact:.1e} (limit 1e-12)"),
    )
}

fn estimator_unbiased(_: &CheckOptions) -> Result<Outcome> {
    let p = MastProblem::new(toy_logistic(6, 15, 0.05, 21), SketchDistribution::rand_k(6, 2)?, gaussian(6, 21, 1))?;
    let support = p.dist().enumerate_support(ENUM_LIMIT)?;
    let mut worst = 0.0f64;
    for k in 0..20 {
        let x = gaussian(6, 21, 100 + k);
        let mut avg = vec![0.0; 6];
        for (s, prob) in &support {
            linalg::axpy(*prob, &p.estimator_gradient(s, &x)?, &mut avg);
        }
        let fd = oracle::finite_diff(|y| p.exact_tilde_value(y, ENUM_LIMIT), &x, 1e-6)?;
        worst = worst.max(linalg::dist_sq(&avg, &fd).sqrt() / linalg::norm_sq(&fd).sqrt().max(1e-12));
    }
    outcome(worst <= 1e-5, format!("worst relative error {worst:.1e} over 20 points (limit 1e-5)"))
}

fn suite_fixtures() -> Result<Vec<(String, MastProblem)>> {
    let d = 6;
    let losses: Vec<(&str, Arc<dyn Loss>)> = vec![("quadratic", toy_quadratic(d, 31)), ("logistic", toy_logistic(d, 20, 0.1, 32))];
    let dists = [
        ("identity", SketchDistribution::identity(d)?),
        ("randk", SketchDistribution::rand_k(d, 2)?),
        ("bernoulli", SketchDistribution::bernoulli(vec![0.3, 0.5, 0.7, 0.9, 0.6, 0.4])?),
    ];
    let mut out = Vec::new();
    for (i, (ln, loss)) in losses.iter().enumerate() {
        for (j, (dn, dist)) in dists.iter().enumerate() {
            let shift = gaussian(d, 33, (3 * i + j) as u64);
            out.push((format!("{ln}/{dn}"), MastProblem::new(loss.clone(), dist.clone(), shift)?));
        }
    }
    Ok(out)
}

fn inequality_suite(opts: &CheckOptions) -> Result<Outcome> {
    let mut failures = Vec::new();
    let (mut rows, mut worst) = (0usize, 0.0f64);
    for (k, (name, p)) in suite_fixtures()?.iter().enumerate() {
        let consts = opts.fault.map(|Fault::HalvedSmoothness| {
            let mut c = SuiteConstants::of(p);
            c.l_f /= 2.0;
            c
        });
        let report = oracle::verify_inequality_suite(p, 100, &mut rng::derive(34, &[rng::tag::POINTS, k as u64]), ENUM_LIMIT, consts)?;
        for r in &report.rows {
            rows += 1;
            worst = worst.max(r.max_violation);
            if !r.holds() {
                failures.push(format!("{name}:{}", r.id));
            }
        }
    }
    // negative control: a halved smoothness constant must be detected
    let control = MastProblem::unshifted(Arc::new(QuadraticLoss::isotropic(vec![1.0; 4], 0.0)?), SketchDistribution::identity(4)?)?;
    let mut c = SuiteConstants::of(&control);
    c.l_f /= 2.0;
    let caught = !oracle::verify_inequality_suite(&control, 100, &mut rng::derive(35, &[rng::tag::POINTS]), ENUM_LIMIT, Some(c))?
        .row("tilde_smoothness")
        .is_none_or(|r| r.holds());
    let mut detail = format!("{rows} rows on 6 fixtures, worst violation {worst:.1e} (limit {VIOLATION_TOL:.0e}); negative control caught: {caught}");
    if !failures.is_empty() {
        let _ = write!(detail, "; violated: {}", failures.join(" "));
    }
    outcome(failures.is_empty() && caught, detail)
}

/// Runs exact double sketched GD and returns the final iterate.
fn dsgd_final(p: &MastProblem, gamma: f64, t: u64, seed: u64, x0: &[f64]) -> Result<Vec<f64>> {
    let cfg = SolverConfig::new(Method::Dsgd { estimator: AbcEstimator::Exact }, gamma, t, seed);
    let out = solvers::run(p, cfg, x0.to_vec(), |_| Ok(()))?;
    match out.diverged {
        Some((t, norm)) => Err(BenchError::Core(mast_core::Error::Divergence { t, norm })),
        None => Ok(out.state.x),
    }
}

fn strongly_convex_dsgd(_: &CheckOptions) -> Result<Outcome> {
    let d = 10;
    let diag: Vec<f64> = (0..d).map(|i| 1.0 + 3.0 * i as f64 / (d - 1) as f64).collect();
    let center = gaussian(d, 41, 0);
    let loss = Arc::new(QuadraticLoss::diagonal(diag, center.clone(), 0.0)?);
    let dist = SketchDistribution::rand_k(d, 3)?;
    let mu_f = loss.strong_convexity();
    let x0 = vec![0.0; d];

    let interp = MastProblem::new(loss.clone(), dist.clone(), center.clone())?;
    let c = interp.constants();
    let gamma = solvers::step_size(StepSizeRule::StronglyConvex, c, &*loss)?;
    let r0 = linalg::dist_sq(&x0, &center);
    let t_interp = ((r0 / 1e-10).ln() / (gamma * c.mu_d * mu_f)).ceil() as u64;
    let mut worst = 0.0f64;
    for s in SEEDS {
        worst = worst.max(linalg::dist_sq(&dsgd_final(&interp, gamma, t_interp, s, &x0)?, &center));
    }

    // coupled coordinates, so the sketched steps do not share a fixed point
    let loss = toy_quadratic(d, 42);
    let (l_f, mu_f) = (loss.smoothness(), loss.strong_convexity());
    let p = MastProblem::new(loss.clone(), dist, gaussian(d, 41, 1))?;
    let gamma = solvers::step_size(StepSizeRule::StronglyConvex, c, &*loss)?;
    let opt = oracle::solve_reference(&TildeObjective::new(&p, ENUM_LIMIT)?, p.shift(), 1e-24, REFERENCE_MAX_ITER)?;
    let x_d = opt.x;
    let gap = opt.value - loss.lower_bound().unwrap_or(0.0);
    let nbhd = bounds::neighborhood(gamma, l_f, mu_f, c, gap);
    let r0 = linalg::dist_sq(&x0, &x_d);
    let t = ((r0 / (1e-3 * nbhd)).ln() / (gamma * c.mu_d * mu_f)).ceil().max(1.0) as u64;
    let mut err = 0.0;
    for s in SEEDS {
        err += linalg::dist_sq(&dsgd_final(&p, gamma, t, s, &x0)?, &x_d) / SEEDS.len() as f64;
    }
    let bound = bounds::strongly_convex(gamma, l_f, mu_f, c, r0, gap, t);
    outcome(
        worst <= 1e-10 && err <= SLACK * bound,
        format!(
            "interpolation: worst |x^T - x*|^2 = {worst:.2e} after T = {t_interp} (limit 1e-10); \
             otherwise: 5-seed mean {err:.3e} vs bound {bound:.3e} x {SLACK} at T = {t}"
        ),
    )
}

fn variance_reduced_linear(_: &CheckOptions) -> Result<Outcome> {
    let d = 20;
    let diag: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / (d - 1) as f64).collect();
    let loss = Arc::new(QuadraticLoss::diagonal(diag, gaussian(d, 51, 0), 0.0)?);
    let dist = SketchDistribution::rand_k(d, 1)?;
    let shift = gaussian(d, 51, 1);
    let (x_d, _) = oracle::diagonal_quadratic_optimum(&loss, &dist, &shift)?;
    let p = MastProblem::new(loss.clone(), dist, shift)?;
    let c = p.constants();
    let (prob, n) = (0.05, d);
    let gamma = solvers::step_size(StepSizeRule::Lsvrdsg, c, &*loss)?;
    let rho = bounds::lsvrdsg_rate(gamma, loss.strong_convexity(), c, prob);
    let t_end = 25_000u64;

    let mut psi = vec![0.0; t_end as usize + 1];
    let mut worst_final = 0.0f64;
    for s in SEEDS {
        let cfg = SolverConfig::new(Method::Lsvrdsg { prob, batch: n }, gamma, t_end, s);
        let mut solver = Solver::new(&p, cfg, vec![0.0; d])?;
        for t in 0..=t_end {
            if t > 0 {
                solver.step()?;
            }
            let sup = solver.support().expect("variance-reduced solver has a support");
            psi[t as usize] += solvers::lsvrdsg_lyapunov(&p, sup, solver.state(), &x_d, gamma, prob)? / SEEDS.len() as f64;
        }
        worst_final = worst_final.max(linalg::dist_sq(&solver.state().x, &x_d));
    }
    let psi0 = psi[0];
    let (mut worst_ratio, mut at) = (0.0f64, 0usize);
    for (t, v) in psi.iter().enumerate() {
        let r = v / ((1.0 - rho).powi(t as i32) * psi0);
        if r > worst_ratio {
            (worst_ratio, at) = (r, t);
        }
    }
    outcome(
        worst_final < 1e-8 && worst_ratio <= SLACK,
        format!(
            "rate {rho:.4}; worst final |x - x*|^2 = {worst_final:.2e} (limit 1e-8); \
             max mean Psi^t / ((1-rate)^t Psi^0) = {worst_ratio:.3} at t = {at} (limit {SLACK})"
        ),
    )
}

/// Smallest value of a smooth objective found by gradient descent from
/// `starts` Gaussian points, capped at `iters` steps each.
fn multistart_min(obj: &dyn SmoothObjective, starts: u64, iters: u64, seed: u64) -> Result<f64> {
    let step = 1.0 / obj.smoothness();
    let mut best = f64::INFINITY;
    for k in 0..starts {
        let mut x: Vec<f64> = gaussian(obj.dim(), seed, k).iter().map(|v| 2.0 * v).collect();
        for _ in 0..iters {
            let g = obj.gradient(&x)?;
            if linalg::norm_sq(&g) < 1e-24 {
                break;
            }
            linalg::axpy(-step, &g, &mut x);
        }
        best = best.min(obj.value(&x)?);
    }
    Ok(best)
}

struct Envelope {
    name: &'static str,
    mean_min: f64,
    bound: f64,
}

impl Envelope {
    fn holds(&self) -> bool {
        self.mean_min <= SLACK * self.bound
    }
}

/// Mean over seeds of `min_{t < T} |grad f~(x^t)|^2` for a single-node run.
fn mean_min_grad(p: &MastProblem, obj: &TildeObjective, method: Method, gamma: f64, t_end: u64, x0: &[f64], low: &mut f64) -> Result<f64> {
    let mut acc = 0.0;
    for s in SEEDS {
        let mut best = f64::INFINITY;
        let cfg = SolverConfig::new(method, gamma, t_end - 1, s);
        let out = solvers::run(p, cfg, x0.to_vec(), |sv| {
            best = best.min(linalg::norm_sq(&obj.gradient(&sv.state().x)?));
            *low = low.min(obj.value(&sv.state().x)?);
            Ok(())
        })?;
        if out.diverged.is_some() {
            return Ok(f64::INFINITY);
        }
        acc += best / SEEDS.len() as f64;
    }
    Ok(acc)
}

fn nonconvex_envelope(t_end: u64) -> Result<Envelope> {
    let d = 6;
    let loss = toy_nonconvex(d, 30, 0.1, 61);
    let p = MastProblem::new(loss.clone(), SketchDistribution::rand_k(d, 2)?, gaussian(d, 61, 0))?;
    let obj = TildeObjective::new(&p, ENUM_LIMIT)?;
    let x0 = gaussian(d, 61, 1);
    let gamma = solvers::step_size(StepSizeRule::Nonconvex { iterations: t_end }, p.constants(), &*loss)?;
    let mut low = multistart_min(&obj, 10, 20_000, 62)?;
    let mean_min = mean_min_grad(&p, &obj, Method::Dsgd { estimator: AbcEstimator::Exact }, gamma, t_end, &x0, &mut low)?;
    let f_inf = loss.lower_bound().unwrap_or(0.0);
    let bound = bounds::nonconvex(gamma, loss.smoothness(), p.constants(), t_end, obj.value(&x0)? - low, low - f_inf);
    Ok(Envelope { name: "nonconvex logistic", mean_min, bound })
}

fn subsampled_envelope(t_end: u64) -> Result<Envelope> {
    let d = 6;
    let (a, b) = toy_data(d, 40, 71);
    let plain = LogisticLoss::new(a, b, 0.05)?;
    let f_inf = oracle::solve_reference(&LossObjective(&plain), &vec![0.0; d], 1e-24, REFERENCE_MAX_ITER)?.value;
    let loss = Arc::new(plain.with_lower_bound(f_inf));
    let p = MastProblem::new(loss.clone(), SketchDistribution::rand_k(d, 2)?, gaussian(d, 71, 0))?;
    let obj = TildeObjective::new(&p, ENUM_LIMIT)?;
    let estimator = AbcEstimator::UniformSubsample { batch: 4 };
    let abc = estimator.constants(&*loss)?;
    let gamma = solvers::step_size(StepSizeRule::Abc { iterations: t_end, abc }, p.constants(), &*loss)?;
    let tilde_inf = oracle::solve_reference(&obj, p.shift(), 1e-24, REFERENCE_MAX_ITER)?.value;
    let x0 = gaussian(d, 71, 1);
    let mut low = tilde_inf;
    let mean_min = mean_min_grad(&p, &obj, Method::Dsgd { estimator }, gamma, t_end, &x0, &mut low)?;
    let bound = bounds::abc_nonconvex(gamma, loss.smoothness(), p.constants(), abc, t_end, obj.value(&x0)? - tilde_inf, tilde_inf - f_inf)?;
    Ok(Envelope { name: "subsampled logistic", mean_min, bound })
}

fn distributed_envelope(t_end: u64) -> Result<Envelope> {
    let d = 6;
    let dists = [
        SketchDistribution::rand_k(d, 1)?,
        SketchDistribution::rand_k(d, 3)?,
        SketchDistribution::bernoulli_uniform(d, 0.5)?,
        SketchDistribution::identity(d)?,
    ];
    let members = dists
        .into_iter()
        .enumerate()
        .map(|(i, dist)| {
            let diag = (0..d).map(|j| 0.5 + ((i + j) % 4) as f64).collect();
            let q: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(diag, gaussian(d, 81, i as u64).iter().map(|v| 2.0 * v).collect(), 0.1 * i as f64)?);
            Ok((q, dist))
        })
        .collect::<Result<Vec<_>>>()?;
    let cluster = Cluster::new(members, gaussian(d, 81, 10))?;
    let obj = ClusterObjective::new(&cluster, ENUM_LIMIT)?;
    let tilde_inf = oracle::solve_reference(&obj, cluster.shift(), 1e-24, REFERENCE_MAX_ITER)?.value;
    let het = cluster.heterogeneity(tilde_inf)?;
    let gamma = distributed::distributed_step_size(&cluster, DistributedRule::Nonconvex { iterations: t_end })?;
    let x0 = gaussian(d, 81, 11);
    let mut acc = 0.0;
    for s in SEEDS {
        let mut best = f64::INFINITY;
        let cfg = DistributedConfig { gamma, iterations: t_end - 1, seed: s };
        let out = distributed::run_distributed(&cluster, cfg, x0.clone(), |st| {
            best = best.min(linalg::norm_sq(&obj.gradient(&st.x)?));
            Ok(())
        })?;
        acc += if out.diverged.is_some() { f64::INFINITY } else { best / SEEDS.len() as f64 };
    }
    let bound = distributed::bounds::nonconvex(&cluster, gamma, t_end, obj.value(&x0)? - tilde_inf, het);
    Ok(Envelope { name: "4-node quadratic", mean_min: acc, bound })
}

fn gradient_envelopes(_: &CheckOptions) -> Result<Outcome> {
    let t_end = 1000;
    let envs = [nonconvex_envelope(t_end)?, subsampled_envelope(t_end)?, distributed_envelope(t_end)?];
    let detail = envs
        .iter()
        .map(|e| format!("{}: {:.3e} vs {:.3e} x {SLACK}", e.name, e.mean_min, e.bound))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(envs.iter().all(Envelope::holds), format!("mean min |grad|^2 over 5 seeds, T = {t_end}: {detail}"))
}

fn probabilistic_estimator(_: &CheckOptions) -> Result<Outcome> {
    let d = 6;
    let loss = toy_nonconvex(d, 30, 0.1, 91);
    let p = MastProblem::new(loss.clone(), SketchDistribution::rand_k(d, 2)?, gaussian(d, 91, 0))?;
    let obj = TildeObjective::new(&p, ENUM_LIMIT)?;
    let n = obj.support().len();
    let x0 = gaussian(d, 91, 1);

    // full refresh every step is gradient descent on the sketched objective
    let gamma = solvers::step_size(StepSizeRule::SPage { prob: 1.0, small_batch: 1 }, p.constants(), &*loss)?;
    let steps = 200;
    let gd = oracle::gd_trajectory(&obj, &x0, gamma, steps)?;
    let cfg = SolverConfig::new(Method::SPage { prob: 1.0, batch: n, small_batch: 1 }, gamma, steps as u64, 0);
    let mut mismatches = 0usize;
    solvers::run(&p, cfg, x0.clone(), |s| {
        if s.state().x != gd[s.state().t as usize] {
            mismatches += 1;
        }
        Ok(())
    })?;

    let (prob, b, b_small, t_end) = (0.2, 5usize, 2usize, 1000u64);
    let gamma = solvers::step_size(StepSizeRule::SPage { prob, small_batch: b_small }, p.constants(), &*loss)?;
    let mut low = multistart_min(&obj, 10, 20_000, 92)?;
    let (mut avg_grad, mut sigma2, mut psi_terms) = (0.0, 0.0f64, 0.0);
    for s in SEEDS {
        let cfg = SolverConfig::new(Method::SPage { prob, batch: b, small_batch: b_small }, gamma, t_end, s);
        let mut solver = Solver::new(&p, cfg, x0.clone())?;
        let g0 = solver.state().estimator.clone().expect("estimator is initialized");
        psi_terms += gamma / (2.0 * prob) * linalg::dist_sq(&g0, &obj.gradient(&x0)?) / SEEDS.len() as f64;
        let mut sum = 0.0;
        for t in 0..t_end {
            if t > 0 {
                solver.step()?;
            }
            let x = &solver.state().x;
            let full = obj.gradient(x)?;
            sum += linalg::norm_sq(&full);
            low = low.min(obj.value(x)?);
            let var = obj.support().iter().map(|(sk, _)| Ok(linalg::dist_sq(&p.estimator_gradient(sk, x)?, &full))).sum::<Result<f64>>()? / n as f64;
            sigma2 = sigma2.max(var);
        }
        avg_grad += sum / t_end as f64 / SEEDS.len() as f64;
    }
    let psi0 = obj.value(&x0)? - low + psi_terms;
    let bound = bounds::spage(gamma, t_end, psi0, n, b, sigma2);
    outcome(
        mismatches == 0 && avg_grad <= SLACK * bound,
        format!(
            "p = 1, b = N: {mismatches} of {} iterates differ from GD; \
             time-averaged |grad|^2 over 5 seeds {avg_grad:.3e} vs bound {bound:.3e} x {SLACK}",
            steps + 1
        ),
    )
}

const SWEEP_CONFIG: &str = r#"
name = "gamma-sweep"
[data]
fixture = "synthetic"
fractions = [0.75, 0.25]
[loss]
kind = "logistic"
kappa = 1000.0
[sketch]
kind = "randk"
k = 1
[solver]
method = "dsgd"
step = "strongly_convex"
iterations = 3000
[run]
cadence = 50
plot = false
"#;

fn gamma_sweep(_: &CheckOptions) -> Result<Outcome> {
    let cfg = ExperimentConfig::from_toml(SWEEP_CONFIG)?;
    let cells = experiment::sweep(&cfg, Axis::GammaMultiplier, &[1.0, 50.0])?;
    let base = summarize(&cells[0].runs);
    let losses: Vec<f64> = base.iter().map(|r| r.mean("mast_loss").unwrap_or(f64::NAN)).collect();
    let rises = losses.windows(2).filter(|w| !(w[1] <= w[0])).count();
    let status = cell_status(&cells[1]);
    let big = summarize(&cells[1].runs);
    let (half, end) = output::halves(&big, "mast_loss", cfg.solver.iterations).unwrap_or((f64::NAN, f64::NAN));
    outcome(
        rises == 0 && base.iter().all(|r| r.n == SEEDS.len()) && status != CellStatus::Converged,
        format!(
            "1x: {rises} increases over {} logged points ({:.4} -> {:.4}); 50x: {} (loss {half:.4} at T/2, {end:.4} at T)",
            losses.len(),
            losses.first().unwrap_or(&f64::NAN),
            losses.last().unwrap_or(&f64::NAN),
            status.name()
        ),
    )
}

const ROBUSTNESS_CONFIG: &str = r#"
name = "robustness"
[data]
fixture = "synthetic"
fractions = [0.7, 0.18, 0.12]
[loss]
kind = "logistic"
kappa = 1000.0
[sketch]
kind = "randk"
q = 0.5
[solver]
method = "dsgd"
step = "strongly_convex"
iterations = 10000
[run]
seeds = [0]
checkpoint_every = 50
"#;

fn robustness_study(_: &CheckOptions) -> Result<Outcome> {
    let base = ExperimentConfig::from_toml(ROBUSTNESS_CONFIG)?;
    let mut parts = Vec::new();
    let mut passed = true;
    for q in [0.3, 0.5, 0.7] {
        let p = experiment::prepare(&base.with_axis(Axis::Q, q)?)?;
        let r = experiment::robustness(&p, 1000, None)?;
        let (m, e) = (quantiles(&r.mast)[2], quantiles(&r.erm)[2]);
        let asserted = q >= 0.5;
        if asserted && !(m > e) {
            passed = false;
        }
        parts.push(format!("q={q}: median {m:.4} vs {e:.4}{}", if asserted { "" } else { " (not asserted)" }));
    }
    outcome(passed, format!("sketch-trained vs plain minimizer, 1000 sketches: {}", parts.join("; ")))
}

const DETERMINISM_CONFIG: &str = r#"
name = "determinism"
[data]
fixture = "synthetic"
[loss]
kind = "logistic"
kappa = 100.0
[sketch]
kind = "randk"
q = 0.05
[solver]
method = "dsgd"
iterations = 40
subsample = 64
[run]
seeds = [0, 1]
cadence = 10
checkpoint_every = 10
"#;

fn csv_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| BenchError::io(&d, e))? {
            let path = e.map_err(|e| BenchError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "csv") {
                let rel = path.strip_prefix(dir).expect("under dir").to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).map_err(|e| BenchError::io(&path, e))?));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Runs every command once into `dir`.
pub fn run_every_command(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let p = experiment::prepare(cfg)?;
    output::write_run(&p, &p.run_all(Recording::METRICS)?, &dir.join("run"))?;
    let cells = experiment::sweep(cfg, Axis::GammaMultiplier, &[1.0, 4.0])?;
    output::write_sweep(cfg, Axis::GammaMultiplier, &cells, &dir.join("sweep"))?;
    output::write_robustness(&p, &experiment::robustness(&p, 50, None)?, &dir.join("robustness"))?;
    Ok(())
}

fn determinism(opts: &CheckOptions) -> Result<Outcome> {
    let cfg = ExperimentConfig::from_toml(DETERMINISM_CONFIG)?;
    let root = opts.scratch.join("determinism");
    let (a, b) = (root.join("a"), root.join("b"));
    for d in [&a, &b] {
        if d.exists() {
            std::fs::remove_dir_all(d).map_err(|e| BenchError::io(d, e))?;
        }
        run_every_command(&cfg, d)?;
    }
    let (fa, fb) = (csv_files(&a)?, csv_files(&b)?);
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    outcome(
        fa.len() == fb.len() && fa.len() >= 7 && differing.is_empty(),
        format!("{} CSV files compared, {} differ {:?}", fa.len(), differing.len(), differing),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_ids_are_unique() {
        let r = registry();
        let mut ids: Vec<&str> = r.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), r.len());
        assert_eq!(r.len(), 10);
    }

    #[test]
    fn fast_checks_pass() {
        let opts = CheckOptions::default();
        for c in registry().iter().filter(|c| ["sketch_moments", "estimator_unbiased"].contains(&c.id)) {
            let r = run_check(c, &opts);
            assert!(r.passed, "{}", report_line(&r));
        }
    }

    #[test]
    fn filter_selects_by_substring() {
        let r = run_checks(Some("estimator_unb"), &CheckOptions::default(), |_| {});
        assert_eq!(r.len(), 1);
        assert!("nope".parse::<Fault>().is_err());
    }

    #[test]
    fn csv_report_has_a_row_per_result() {
        let r = CheckResult { id: "x", passed: false, seconds: 1.0, budget: Some(2.0), detail: "a \"b\"".into() };
        let csv = report_csv(&[r.clone(), r]);
        assert_eq!(csv.lines().filter(|l| l.starts_with("x,")).count(), 2);
        assert!(csv.contains("'b'"));
    }
}
