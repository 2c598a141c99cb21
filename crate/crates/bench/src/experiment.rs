//! Turning a config into a problem and running it over seeds, sweep cells
//! and sampled sketches.

use std::path::Path;
use std::sync::Arc;

use mast_core::data::{self, accuracy, Dataset, Split};
use mast_core::distributed::{self, Cluster, ClusterObjective, DistributedConfig, DistributedRule};
use mast_core::linalg::{self, CsrMatrix};
use mast_core::objective::{AbcEstimator, LogisticLoss, Loss, MastProblem, NonconvexLogisticLoss};
use mast_core::oracle::{self, LossObjective, SmoothObjective, REFERENCE_MAX_ITER};
use mast_core::record::{format_float, Evaluator, MetricRow};
use mast_core::rng;
use mast_core::sketch::{SketchDistribution, DEFAULT_SUPPORT_LIMIT};
use mast_core::solvers::{self, Method, SolverConfig, StepSizeRule};
use rayon::prelude::*;

use crate::config::{Axis, DataConfig, ExperimentConfig, LossConfig, LossKind, MethodKind, ShiftConfig, SketchConfig, StepKind};
use crate::error::{BenchError, Result};
use crate::fixtures;

/// Squared gradient norm at which reference solutions stop.
pub const REFERENCE_TOL: f64 = 1e-20;

/// A config resolved into data, losses and a step size.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub dataset: Dataset,
    pub split: Split,
    /// Training loss with the configured sketch and shift.
    pub problem: MastProblem,
    pub cluster: Option<Cluster>,
    pub gamma: f64,
}

pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let ds = match (&cfg.fixture, &cfg.path) {
        (Some(name), None) => fixtures::dataset(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
            data::parse_libsvm(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?
        }
        _ => return Err(BenchError::Config("data: set exactly one of fixture and path".into())),
    };
    Ok(if cfg.intercept { ds.with_intercept() } else { ds })
}

pub fn build_loss(cfg: &LossConfig, features: CsrMatrix, labels: Vec<f64>) -> Result<Arc<dyn Loss>> {
    Ok(match (cfg.kind, cfg.kappa, cfg.lambda) {
        (LossKind::Logistic, Some(kappa), _) => Arc::new(LogisticLoss::with_condition_number(features, labels, kappa)?),
        (LossKind::Logistic, None, lambda) => Arc::new(LogisticLoss::new(features, labels, lambda.unwrap_or(0.0))?),
        (LossKind::NonconvexLogistic, _, lambda) => {
            Arc::new(NonconvexLogisticLoss::new(features, labels, lambda.unwrap_or(0.0))?.with_lower_bound(0.0))
        }
    })
}

/// `q` resolves to `K = round(q d)`, at least 1.
pub fn build_distribution(cfg: &SketchConfig, d: usize) -> Result<SketchDistribution> {
    Ok(match *cfg {
        SketchConfig::Identity => SketchDistribution::identity(d)?,
        SketchConfig::RandK { k: Some(k), .. } => SketchDistribution::rand_k(d, k)?,
        SketchConfig::RandK { q: Some(q), .. } => SketchDistribution::rand_k(d, ((q * d as f64).round() as usize).clamp(1, d))?,
        SketchConfig::RandK { .. } => return Err(BenchError::Config("sketch: randk needs k or q".into())),
        SketchConfig::Bernoulli { p } => SketchDistribution::bernoulli_uniform(d, p)?,
    })
}

/// `d` whitespace-separated weights; `#` lines are skipped, so a one-seed
/// `final_models.txt` can be read back.
pub fn read_weights(path: &Path, d: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    let w = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().map_err(|_| BenchError::Config(format!("{}: bad weight {t:?}", path.display()))))
        .collect::<Result<Vec<f64>>>()?;
    if w.len() != d {
        return Err(BenchError::Config(format!("{}: expected {d} weights, found {}", path.display(), w.len())));
    }
    Ok(w)
}

pub fn format_weights(x: &[f64]) -> String {
    x.iter().map(|v| format_float(*v) + "\n").collect()
}

fn minimize(loss: &dyn Loss, d: usize) -> Result<oracle::Reference> {
    Ok(oracle::solve_reference(&LossObjective(loss), &vec![0.0; d], REFERENCE_TOL, REFERENCE_MAX_ITER)?)
}

fn shift_vector(cfg: &ShiftConfig, loss: &dyn Loss, d: usize) -> Result<Vec<f64>> {
    match cfg {
        ShiftConfig::Zero => Ok(vec![0.0; d]),
        ShiftConfig::File { path } => read_weights(path, d),
        ShiftConfig::Reference => Ok(minimize(loss, d)?.x),
    }
}

fn choose_gamma(cfg: &ExperimentConfig, problem: &MastProblem, cluster: Option<&Cluster>) -> Result<f64> {
    let s = &cfg.solver;
    let iterations = s.iterations.max(1);
    let base = if let Some(c) = cluster {
        let rule = match s.step {
            StepKind::StronglyConvex => DistributedRule::StronglyConvex,
            StepKind::Convex => DistributedRule::Convex,
            StepKind::Nonconvex => DistributedRule::Nonconvex { iterations },
            StepKind::Manual => return Ok(s.gamma.unwrap_or(0.0) * s.gamma_multiplier),
            other => return Err(BenchError::Config(format!("solver.step: {other:?} does not apply to distributed runs"))),
        };
        distributed::distributed_step_size(c, rule)?
    } else {
        let rule = match s.step {
            StepKind::StronglyConvex => StepSizeRule::StronglyConvex,
            StepKind::Convex => StepSizeRule::Convex,
            StepKind::Nonconvex => StepSizeRule::Nonconvex { iterations },
            StepKind::Lsvrdsg => StepSizeRule::Lsvrdsg,
            StepKind::LsvrdsgConvex => StepSizeRule::LsvrdsgConvex,
            StepKind::Spage => StepSizeRule::SPage {
                prob: s.prob.ok_or_else(|| BenchError::Config("solver.prob: required by the spage step".into()))?,
                small_batch: s.small_batch.ok_or_else(|| BenchError::Config("solver.small_batch: required by the spage step".into()))?,
            },
            StepKind::Manual => StepSizeRule::Manual(s.gamma.unwrap_or(0.0)),
        };
        solvers::step_size(rule, problem.constants(), problem.loss())?
    };
    Ok(base * s.gamma_multiplier)
}

/// Node `i` of `m` gets the `i`-th contiguous slice of the training rows.
fn build_cluster(cfg: &ExperimentConfig, ds: &Dataset, train: &[usize], shift: &[f64]) -> Result<Cluster> {
    let m = cfg.nodes.len();
    if train.len() < m {
        return Err(BenchError::Config(format!("nodes: {m} nodes but only {} training rows", train.len())));
    }
    let mut members = Vec::with_capacity(m);
    for (i, node) in cfg.nodes.iter().enumerate() {
        let shard = &train[i * train.len() / m..(i + 1) * train.len() / m];
        let (a, b) = ds.subset(shard)?;
        members.push((build_loss(&cfg.loss, a, b)?, build_distribution(&node.sketch, ds.d())?));
    }
    Ok(Cluster::new(members, shift.to_vec())?)
}

/// Loads data, builds the training problem and resolves the step size.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.data)?;
    let split = data::split(&dataset, &cfg.data.fractions, cfg.data.split_seed)?;
    let (a, b) = dataset.subset(split.train())?;
    let loss = build_loss(&cfg.loss, a, b)?;
    let d = dataset.d();
    let shift = shift_vector(&cfg.shift, &*loss, d)?;
    let problem = MastProblem::new(loss, build_distribution(&cfg.sketch, d)?, shift)?;
    let cluster = match cfg.solver.method {
        MethodKind::Distributed => Some(build_cluster(cfg, &dataset, split.train(), problem.shift())?),
        _ => None,
    };
    let gamma = choose_gamma(cfg, &problem, cluster.as_ref())?;
    Ok(Prepared { cfg: cfg.clone(), dataset, split, problem, cluster, gamma })
}

/// What a seed run records besides its final iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recording {
    pub metrics: bool,
    /// Keep the iterate with the best validation accuracy among checkpoints.
    pub best_validation: bool,
}

impl Recording {
    pub const METRICS: Self = Self { metrics: true, best_validation: false };
    pub const SELECTION: Self = Self { metrics: false, best_validation: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: u64,
    pub val_acc: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    /// Iteration and iterate norm at which the run diverged.
    pub diverged: Option<(u64, f64)>,
    pub final_t: u64,
    pub final_x: Vec<f64>,
    pub best: Option<Checkpoint>,
}

impl Prepared {
    fn method(&self) -> Result<Method> {
        let s = &self.cfg.solver;
        let missing = |f: &str| BenchError::Config(format!("solver.{f}: required"));
        Ok(match s.method {
            MethodKind::Dsgd => Method::Dsgd {
                estimator: s.subsample.map_or(AbcEstimator::Exact, |batch| AbcEstimator::UniformSubsample { batch }),
            },
            MethodKind::Lsvrdsg => Method::Lsvrdsg { prob: s.prob.ok_or_else(|| missing("prob"))?, batch: s.batch.ok_or_else(|| missing("batch"))? },
            MethodKind::Spage => Method::SPage {
                prob: s.prob.ok_or_else(|| missing("prob"))?,
                batch: s.batch.ok_or_else(|| missing("batch"))?,
                small_batch: s.small_batch.ok_or_else(|| missing("small_batch"))?,
            },
            MethodKind::Distributed => return Err(BenchError::Config("solver.method: distributed runs have no single-node method".into())),
        })
    }

    /// Runs one seed from `x0 = s`, recording rows every `cadence` iterations
    /// and at the last one.
    pub fn run_seed(&self, seed: u64, rec: Recording) -> Result<SeedRun> {
        let cfg = &self.cfg;
        let end = cfg.solver.iterations;
        let (cadence, every) = (cfg.run.cadence, cfg.run.checkpoint_every);
        let mut ev = Evaluator::new(&self.problem).with_accuracy(&self.dataset, self.split.validation(), Some(self.split.test()));
        if rec.metrics && cfg.run.mast_metrics && self.cluster.is_none() {
            ev = ev.with_mast()?;
        }
        let cluster_obj = match (&self.cluster, rec.metrics && cfg.run.mast_metrics) {
            (Some(c), true) => match ClusterObjective::new(c, DEFAULT_SUPPORT_LIMIT) {
                Ok(o) => Some(o),
                Err(mast_core::Error::SupportTooLarge { .. }) => None,
                Err(e) => return Err(e.into()),
            },
            _ => None,
        };
        let val = self.split.validation();
        let mut rows: Vec<MetricRow> = Vec::new();
        let mut best: Option<Checkpoint> = None;

        let mut observe = |t: u64, x: &[f64], comm: Option<u64>| -> mast_core::Result<()> {
            if rec.metrics && (t.is_multiple_of(cadence) || t == end) {
                let mut row = ev.evaluate(seed, t, x)?;
                if let Some(o) = &cluster_obj {
                    row.mast_loss = Some(o.value(x)?);
                    row.grad_norm_sq_mast = Some(linalg::norm_sq(&o.gradient(x)?));
                }
                row.comm_nnz = comm;
                rows.push(row);
            }
            if let (true, Some(v)) = (rec.best_validation && t.is_multiple_of(every), val) {
                let acc = accuracy(&self.dataset, v, x)?;
                if best.as_ref().is_none_or(|b| acc > b.val_acc) {
                    best = Some(Checkpoint { t, val_acc: acc, x: x.to_vec() });
                }
            }
            Ok(())
        };

        let x0 = self.problem.shift().to_vec();
        let (final_t, final_x, diverged) = match &self.cluster {
            Some(c) => {
                let dcfg = DistributedConfig { gamma: self.gamma, iterations: end, seed };
                let out = distributed::run_distributed(c, dcfg, x0, |st| {
                    observe(st.t, &st.x, Some(st.comm.total_downlink + st.comm.total_uplink))
                })?;
                (out.state.t, out.state.x, out.diverged)
            }
            None => {
                let scfg = SolverConfig::new(self.method()?, self.gamma, end, seed);
                let out = solvers::run(&self.problem, scfg, x0, |s| observe(s.state().t, &s.state().x, None))?;
                (out.state.t, out.state.x, out.diverged)
            }
        };
        if diverged.is_some() && rec.metrics {
            match rows.last_mut() {
                Some(r) if r.t == final_t => r.diverged = true,
                _ => {
                    let mut r = ev.evaluate(seed, final_t, &final_x)?;
                    r.diverged = true;
                    rows.push(r);
                }
            }
        }
        Ok(SeedRun { seed, rows, diverged, final_t, final_x, best })
    }

    /// All configured seeds in parallel, returned in config order.
    pub fn run_all(&self, rec: Recording) -> Result<Vec<SeedRun>> {
        self.cfg.run.seeds.par_iter().map(|&s| self.run_seed(s, rec)).collect()
    }
}

/// One value of a sweep axis.
pub struct Cell {
    pub value: f64,
    pub cfg: ExperimentConfig,
    pub gamma: f64,
    pub runs: Vec<SeedRun>,
}

impl Cell {
    pub fn diverged_seeds(&self) -> usize {
        self.runs.iter().filter(|r| r.diverged.is_some()).count()
    }
}

/// Every cell config is validated before any compute starts.
pub fn sweep(cfg: &ExperimentConfig, axis: Axis, values: &[f64]) -> Result<Vec<Cell>> {
    if values.is_empty() {
        return Err(BenchError::Config("--values: empty list".into()));
    }
    let cfgs = values.iter().map(|&v| cfg.with_axis(axis, v)).collect::<Result<Vec<_>>>()?;
    cfgs.into_par_iter()
        .zip(values.par_iter())
        .map(|(c, &value)| {
            let p = prepare(&c)?;
            let runs = p.run_all(Recording::METRICS)?;
            Ok(Cell { value, gamma: p.gamma, cfg: c, runs })
        })
        .collect()
}

/// Test accuracies of two models under the same sampled sketches.
#[derive(Debug, Clone, PartialEq)]
pub struct Robustness {
    pub seed: u64,
    /// Iteration of the selected checkpoint; `None` for a model read from a file.
    pub checkpoint: Option<u64>,
    pub mast_model: Vec<f64>,
    pub erm_model: Vec<f64>,
    pub mast: Vec<f64>,
    pub erm: Vec<f64>,
}

/// Compares the sketched-training model (best validation checkpoint of the
/// first seed, or `model`) against the unsketched minimizer. Sketches come
/// from the stream `(seed, ROBUSTNESS)` and are applied as `s + S(x - s)`.
pub fn robustness(p: &Prepared, n_sketches: usize, model: Option<Vec<f64>>) -> Result<Robustness> {
    if n_sketches == 0 {
        return Err(BenchError::Config("--n: need at least one sketch".into()));
    }
    let seed = p.cfg.run.seeds[0];
    let (mast_model, checkpoint) = match model {
        Some(x) => (x, None),
        None => {
            let r = p.run_seed(seed, Recording::SELECTION)?;
            match r.best {
                Some(c) => (c.x, Some(c.t)),
                None => (r.final_x, Some(r.final_t)),
            }
        }
    };
    let erm_model = minimize(p.problem.loss(), p.problem.dim())?.x;
    let test = p.split.test();
    let mut r = rng::derive(seed, &[rng::tag::ROBUSTNESS]);
    let (mut mast, mut erm) = (Vec::with_capacity(n_sketches), Vec::with_capacity(n_sketches));
    for _ in 0..n_sketches {
        let s = p.problem.dist().sample(&mut r);
        mast.push(accuracy(&p.dataset, test, &p.problem.sketched_point(&s, &mast_model)?)?);
        erm.push(accuracy(&p.dataset, test, &p.problem.sketched_point(&s, &erm_model)?)?);
    }
    Ok(Robustness { seed, checkpoint, mast_model, erm_model, mast, erm })
}

/// `[min, q25, median, q75, max]` with linear interpolation between order
/// statistics.
pub fn quantiles(v: &[f64]) -> [f64; 5] {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |f: f64| {
        if s.is_empty() {
            return f64::NAN;
        }
        let h = f * (s.len() - 1) as f64;
        let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
        s[lo] + (h - lo as f64) * (s[hi] - s[lo])
    };
    [q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)]
}
