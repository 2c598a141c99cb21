//! Lockstep simulation of distributed double sketched gradient descent.
//!
//! The server samples one sketch per node, sends each node its sketched
//! model `s + S_i (x - s)`, collects `S_i^T grad f_i(y_i)` and averages.
//! Sketches for node `i` at round `t` come from the stream
//! `(seed, NODE, i, t)`, and the reduction runs in node order.

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::objective::{Loss, MastProblem};
use crate::oracle::SmoothObjective;
use crate::rng;
use crate::sketch::{SketchDistribution, SketchSample, SpectralConstants};
use crate::solvers::DIVERGENCE_NORM;
use std::sync::Arc;

/// One participant: its loss and sketch distribution over the shared shift.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: u64,
    problem: MastProblem,
}

impl Node {
    pub fn problem(&self) -> &MastProblem {
        &self.problem
    }

    pub fn constants(&self) -> SpectralConstants {
        self.problem.constants()
    }

    /// `L_{f_i}^2 L_{D_i} L_{S_i}^max`
    pub fn rate_product(&self) -> f64 {
        let c = self.constants();
        let l = self.problem.loss().smoothness();
        l * l * c.l_d * c.l_s_max
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    nodes: Vec<Node>,
    shift: Vec<f64>,
    d_max: f64,
}

impl Cluster {
    /// Nodes get ids `0..M` in the given order.
    pub fn new(members: Vec<(Arc<dyn Loss>, SketchDistribution)>, shift: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("cluster needs at least one node".into()));
        }
        let nodes = members
            .into_iter()
            .enumerate()
            .map(|(i, (loss, dist))| Ok(Node { id: i as u64, problem: MastProblem::new(loss, dist, shift.clone())? }))
            .collect::<Result<Vec<_>>>()?;
        let d_max = nodes.iter().map(Node::rate_product).fold(0.0, f64::max);
        Ok(Self { nodes, shift, d_max })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    /// `max_i L_{f_i}^2 L_{D_i} L_{S_i}^max`
    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    /// `max_i L_{f_i} L_{S_i}^max`
    pub fn max_smooth_product(&self) -> f64 {
        self.nodes.iter().map(|n| n.problem.loss().smoothness() * n.constants().l_s_max).fold(0.0, f64::max)
    }

    /// `min_i mu_{D_i} mu_{f_i}`, the contraction coefficient of the averaged
    /// sketched objective.
    pub fn strong_convexity(&self) -> f64 {
        self.nodes.iter().map(|n| n.problem.loss().strong_convexity() * n.constants().mu_d).fold(f64::INFINITY, f64::min)
    }

    /// `f~inf - (1/M) sum_i f_i^inf` given the infimum of the averaged
    /// sketched objective.
    pub fn heterogeneity(&self, tilde_inf: f64) -> Result<f64> {
        let mut acc = 0.0;
        for n in &self.nodes {
            acc += n.problem.loss().lower_bound().ok_or(Error::MissingConstant("node f_i^inf"))?;
        }
        Ok(tilde_inf - acc / self.len() as f64)
    }

    /// The sketch the server draws for `node` at round `t`.
    pub fn draw_sketch(&self, node: usize, seed: u64, t: u64) -> SketchSample {
        let n = &self.nodes[node];
        n.problem.dist().sample(&mut rng::derive(seed, &[rng::tag::NODE, n.id, t]))
    }
}

/// Nonzero counts of the payloads exchanged in one round and so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    /// Sum over nodes of `nnz(S_i (x - s))`; nodes hold the shift.
    pub downlink: u64,
    /// Sum over nodes of `nnz(S_i^T grad f_i(y_i))`.
    pub uplink: u64,
    pub total_downlink: u64,
    pub total_uplink: u64,
}

impl CommStats {
    fn accumulate(&self, downlink: u64, uplink: u64) -> Self {
        Self { downlink, uplink, total_downlink: self.total_downlink + downlink, total_uplink: self.total_uplink + uplink }
    }
}

/// Rounds a step with the given per-node sketches:
/// `x - (gamma / M) sum_i S_i^T grad f_i(s + S_i (x - s))`.
pub fn aggregate_step(c: &Cluster, x: &[f64], gamma: f64, sketches: &[SketchSample], t_next: u64) -> Result<(Vec<f64>, u64, u64)> {
    check_dim(c.dim(), x.len())?;
    check_dim(c.len(), sketches.len())?;
    let delta = linalg::sub(x, c.shift());
    let mut sum = vec![0.0; c.dim()];
    let (mut down, mut up) = (0u64, 0u64);
    for (n, s) in c.nodes.iter().zip(sketches) {
        down += linalg::nnz(&s.apply(&delta)?) as u64;
        let g = n.problem.estimator_gradient(s, x)?;
        up += linalg::nnz(&g) as u64;
        linalg::axpy(1.0, &g, &mut sum);
    }
    let mut next = x.to_vec();
    linalg::axpy(-gamma / c.len() as f64, &sum, &mut next);
    let norm = linalg::norm_sq(&next).sqrt();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Divergence { t: t_next, norm });
    }
    Ok((next, down, up))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedState {
    pub x: Vec<f64>,
    pub t: u64,
    pub comm: CommStats,
}

/// One synchronous round from `st`.
pub fn distributed_round(c: &Cluster, st: &DistributedState, gamma: f64, seed: u64) -> Result<DistributedState> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("step size {gamma} must be finite and >= 0")));
    }
    let sketches: Vec<SketchSample> = (0..c.len()).map(|i| c.draw_sketch(i, seed, st.t)).collect();
    let (x, down, up) = aggregate_step(c, &st.x, gamma, &sketches, st.t + 1)?;
    Ok(DistributedState { x, t: st.t + 1, comm: st.comm.accumulate(down, up) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistributedRule {
    /// `1 / sqrt(D_max T)`
    Nonconvex { iterations: u64 },
    /// `1 / max_i L_{f_i} L_{S_i}^max`
    StronglyConvex,
    /// `1 / (2 max_i L_{f_i} L_{S_i}^max)`
    Convex,
}

pub fn distributed_step_size(c: &Cluster, rule: DistributedRule) -> Result<f64> {
    match rule {
        DistributedRule::Nonconvex { iterations: 0 } => Err(Error::Config("iteration count must be >= 1".into())),
        DistributedRule::Nonconvex { iterations } => Ok(1.0 / (c.d_max() * iterations as f64).sqrt()),
        DistributedRule::StronglyConvex => Ok(1.0 / c.max_smooth_product()),
        DistributedRule::Convex => Ok(0.5 / c.max_smooth_product()),
    }
}

pub mod bounds {
    use super::Cluster;

    /// `3 delta0 / (gamma T) + gamma D_max het`
    pub fn nonconvex(c: &Cluster, gamma: f64, t: u64, delta0: f64, het: f64) -> f64 {
        3.0 * delta0 / (gamma * t as f64) + gamma * c.d_max() * het
    }

    /// `(1 - gamma mu)^t r0 + 2 gamma max_i(L_{f_i} L_{S_i}^max) het / mu`
    pub fn strongly_convex(c: &Cluster, gamma: f64, r0_sq: f64, het: f64, t: u64) -> f64 {
        let mu = c.strong_convexity();
        (1.0 - gamma * mu).powf(t as f64) * r0_sq + 2.0 * gamma * c.max_smooth_product() * het / mu
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributedConfig {
    pub gamma: f64,
    pub iterations: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedOutcome {
    pub state: DistributedState,
    pub diverged: Option<(u64, f64)>,
}

/// Runs `cfg.iterations` rounds, observing the initial state and every round.
pub fn run_distributed(
    c: &Cluster,
    cfg: DistributedConfig,
    x0: Vec<f64>,
    mut observe: impl FnMut(&DistributedState) -> Result<()>,
) -> Result<DistributedOutcome> {
    check_dim(c.dim(), x0.len())?;
    let mut st = DistributedState { x: x0, t: 0, comm: CommStats::default() };
    observe(&st)?;
    for _ in 0..cfg.iterations {
        match distributed_round(c, &st, cfg.gamma, cfg.seed) {
            Ok(next) => {
                st = next;
                observe(&st)?;
            }
            Err(Error::Divergence { t, norm }) => return Ok(DistributedOutcome { state: st, diverged: Some((t, norm)) }),
            Err(e) => return Err(e),
        }
    }
    Ok(DistributedOutcome { state: st, diverged: None })
}

/// `(1/M) sum_i f_{D_i}` with every expectation enumerated.
pub struct ClusterObjective<'a> {
    cluster: &'a Cluster,
    supports: Vec<Vec<(SketchSample, f64)>>,
}

impl<'a> ClusterObjective<'a> {
    pub fn new(cluster: &'a Cluster, limit: u128) -> Result<Self> {
        let supports = cluster.nodes.iter().map(|n| n.problem.dist().enumerate_support(limit)).collect::<Result<_>>()?;
        Ok(Self { cluster, supports })
    }
}

impl SmoothObjective for ClusterObjective<'_> {
    fn dim(&self) -> usize {
        self.cluster.dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (n, sup) in self.cluster.nodes.iter().zip(&self.supports) {
            acc += n.problem.tilde_value_over(sup, x)?;
        }
        Ok(acc / self.cluster.len() as f64)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; x.len()];
        for (n, sup) in self.cluster.nodes.iter().zip(&self.supports) {
            linalg::axpy(1.0, &n.problem.tilde_gradient_over(sup, x)?, &mut acc);
        }
        linalg::scale(1.0 / self.cluster.len() as f64, &mut acc);
        Ok(acc)
    }

    fn smoothness(&self) -> f64 {
        self.cluster.nodes.iter().map(|n| n.problem.loss().smoothness() * n.constants().l_d).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{AbcEstimator, QuadraticLoss};
    use crate::oracle::{self, LossObjective};
    use crate::solvers;

    fn half_norm(d: usize) -> Arc<dyn Loss> {
        Arc::new(QuadraticLoss::isotropic(vec![0.0; d], 0.0).unwrap())
    }

    #[test]
    fn two_node_hand_example() {
        let c = Cluster::new(
            vec![(half_norm(2), SketchDistribution::rand_k(2, 1).unwrap()), (half_norm(2), SketchDistribution::rand_k(2, 1).unwrap())],
            vec![0.0; 2],
        )
        .unwrap();
        let s = [
            SketchSample::from_entries(2, [(0, 2.0)]).unwrap(),
            SketchSample::from_entries(2, [(1, 2.0)]).unwrap(),
        ];
        let (x, down, up) = aggregate_step(&c, &[1.0, 1.0], 0.5, &s, 1).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
        assert_eq!((down, up), (2, 2));
    }

    #[test]
    fn single_node_matches_dsgd() {
        let q: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(vec![1.0, 2.0, 3.0], vec![1.0, 0.0, -1.0], 0.0).unwrap());
        let dist = SketchDistribution::rand_k(3, 2).unwrap();
        let shift = vec![0.2, 0.1, 0.0];
        let c = Cluster::new(vec![(q.clone(), dist.clone())], shift.clone()).unwrap();
        let p = MastProblem::new(q, dist, shift).unwrap();
        let mut st = DistributedState { x: vec![1.0; 3], t: 0, comm: CommStats::default() };
        for t in 0..20 {
            let s = c.draw_sketch(0, 11, t);
            let mut x = st.x.clone();
            linalg::axpy(-0.1, &p.estimator_gradient(&s, &x).unwrap(), &mut x);
            st = distributed_round(&c, &st, 0.1, 11).unwrap();
            assert_eq!(st.x, x);
        }
        // the same update rule as the single-node solver with the exact inner gradient
        let sp = solvers::SolverState::new(vec![1.0; 3]);
        let mut r = rng::iteration(3, 0);
        let next = solvers::dsgd_step(&p, &sp, 0.0, &AbcEstimator::Exact, &mut r).unwrap();
        assert_eq!(next.x, sp.x);
    }

    #[test]
    fn identity_nodes_run_gradient_descent_on_average() {
        let a: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(vec![1.0, 2.0], vec![1.0, 0.0], 0.0).unwrap());
        let b: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(vec![3.0, 1.0], vec![-1.0, 2.0], 0.0).unwrap());
        let id = SketchDistribution::identity(2).unwrap();
        let c = Cluster::new(vec![(a.clone(), id.clone()), (b.clone(), id)], vec![0.0; 2]).unwrap();
        let mut st = DistributedState { x: vec![0.0; 2], t: 0, comm: CommStats::default() };
        let mut x = vec![0.0; 2];
        for _ in 0..30 {
            st = distributed_round(&c, &st, 0.2, 0).unwrap();
            let g = linalg::add(&LossObjective(a.as_ref()).gradient(&x).unwrap(), &LossObjective(b.as_ref()).gradient(&x).unwrap());
            linalg::axpy(-0.1, &g, &mut x);
            assert!(linalg::dist_sq(&x, &st.x) < 1e-28);
        }
    }

    #[test]
    fn step_size_examples() {
        let one = Cluster::new(vec![(half_norm(2), SketchDistribution::identity(2).unwrap())], vec![0.0; 2]).unwrap();
        assert!((distributed_step_size(&one, DistributedRule::Nonconvex { iterations: 100 }).unwrap() - 0.1).abs() < 1e-15);
        let scaled = |l: f64| -> Arc<dyn Loss> { Arc::new(QuadraticLoss::diagonal(vec![l; 2], vec![0.0; 2], 0.0).unwrap()) };
        let id = SketchDistribution::identity(2).unwrap();
        let c = Cluster::new(vec![(scaled(2.0), id.clone()), (scaled(3.0), id)], vec![0.0; 2]).unwrap();
        assert_eq!(c.d_max(), 9.0);
        let g = distributed_step_size(&c, DistributedRule::Nonconvex { iterations: 49 }).unwrap();
        assert!((g - 1.0 / 21.0).abs() < 1e-15);
        let sc = Cluster::new(vec![(half_norm(4), SketchDistribution::rand_k(4, 2).unwrap())], vec![0.0; 4]).unwrap();
        assert_eq!(distributed_step_size(&sc, DistributedRule::StronglyConvex).unwrap(), 0.25);
        let sc = Cluster::new(vec![(half_norm(2), SketchDistribution::bernoulli(vec![0.5, 0.75]).unwrap())], vec![0.0; 2]).unwrap();
        assert_eq!(distributed_step_size(&sc, DistributedRule::StronglyConvex).unwrap(), 0.25);
        assert_eq!(distributed_step_size(&sc, DistributedRule::Convex).unwrap(), 0.125);
    }

    #[test]
    fn d_max_dominates_each_node() {
        let a: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(vec![2.0, 1.0, 1.0], vec![0.0; 3], 0.0).unwrap());
        let c = Cluster::new(
            vec![
                (a.clone(), SketchDistribution::rand_k(3, 1).unwrap()),
                (a, SketchDistribution::rand_k(3, 2).unwrap()),
                (half_norm(3), SketchDistribution::identity(3).unwrap()),
            ],
            vec![0.0; 3],
        )
        .unwrap();
        for n in c.nodes() {
            assert!(c.d_max() >= n.rate_product());
        }
        assert_eq!(c.d_max(), 4.0 * 3.0 * 9.0);
    }

    #[test]
    fn uplink_is_sparse_and_counted() {
        let q: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(vec![1.0; 6], vec![1.0; 6], 0.0).unwrap());
        let c = Cluster::new(vec![(q.clone(), SketchDistribution::rand_k(6, 2).unwrap()), (q, SketchDistribution::rand_k(6, 3).unwrap())], vec![0.0; 6]).unwrap();
        let mut prev = CommStats::default();
        run_distributed(&c, DistributedConfig { gamma: 0.05, iterations: 40, seed: 2 }, vec![3.0; 6], |st| {
            if st.t > 0 {
                assert!(st.comm.uplink <= 5);
                assert_eq!(st.comm.total_uplink, prev.total_uplink + st.comm.uplink);
            }
            prev = st.comm;
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn uplink_equals_gradient_nonzeros() {
        let q: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(vec![1.0, 2.0, 0.5, 1.0], vec![1.0, 0.0, 2.0, 0.0], 0.0).unwrap());
        let c = Cluster::new(vec![(q.clone(), SketchDistribution::rand_k(4, 2).unwrap()), (q, SketchDistribution::bernoulli(vec![0.5; 4]).unwrap())], vec![0.0; 4]).unwrap();
        let mut st = DistributedState { x: vec![1.0, 1.0, 0.0, 1.0], t: 0, comm: CommStats::default() };
        for _ in 0..25 {
            let expected: u64 = (0..2)
                .map(|i| {
                    let s = c.draw_sketch(i, 8, st.t);
                    linalg::nnz(&c.nodes()[i].problem().estimator_gradient(&s, &st.x).unwrap()) as u64
                })
                .sum();
            st = distributed_round(&c, &st, 0.1, 8).unwrap();
            assert_eq!(st.comm.uplink, expected);
        }
    }

    #[test]
    fn zero_rounds_and_replay() {
        let c = Cluster::new(vec![(half_norm(3), SketchDistribution::rand_k(3, 1).unwrap()); 3], vec![0.0; 3]).unwrap();
        let mut n = 0;
        run_distributed(&c, DistributedConfig { gamma: 0.1, iterations: 0, seed: 0 }, vec![1.0; 3], |_| {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 1);
        let go = || run_distributed(&c, DistributedConfig { gamma: 0.1, iterations: 30, seed: 4 }, vec![1.0; 3], |_| Ok(())).unwrap();
        assert_eq!(go(), go());
    }

    #[test]
    fn identical_interpolating_nodes_converge_linearly() {
        let center = vec![1.0, -1.0, 2.0, 0.5];
        let q: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(vec![1.0, 2.0, 1.5, 1.0], center.clone(), 0.0).unwrap());
        let c = Cluster::new(vec![(q, SketchDistribution::rand_k(4, 2).unwrap()); 4], center.clone()).unwrap();
        let gamma = distributed_step_size(&c, DistributedRule::StronglyConvex).unwrap();
        let x0 = vec![0.0; 4];
        let r0 = linalg::dist_sq(&x0, &center);
        let t = ((r0 / 1e-10).ln() / (gamma * c.strong_convexity())).ceil() as u64;
        let out = run_distributed(&c, DistributedConfig { gamma, iterations: t, seed: 1 }, x0, |_| Ok(())).unwrap();
        assert!(linalg::dist_sq(&out.state.x, &center) <= 1e-10);
        assert_eq!(c.heterogeneity(0.0).unwrap(), 0.0);
    }

    #[test]
    fn cluster_objective_matches_nodes() {
        let a: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(vec![1.0, 2.0], vec![1.0, 0.0], 0.0).unwrap());
        let b: Arc<dyn Loss> = Arc::new(QuadraticLoss::diagonal(vec![3.0, 1.0], vec![-1.0, 2.0], 1.0).unwrap());
        let c = Cluster::new(vec![(a, SketchDistribution::rand_k(2, 1).unwrap()), (b, SketchDistribution::identity(2).unwrap())], vec![0.0; 2]).unwrap();
        let obj = ClusterObjective::new(&c, 100).unwrap();
        let x = [0.3, -0.4];
        let v = (c.nodes()[0].problem().exact_tilde_value(&x, 100).unwrap() + c.nodes()[1].problem().exact_tilde_value(&x, 100).unwrap()) / 2.0;
        assert!((obj.value(&x).unwrap() - v).abs() < 1e-14);
        let r = oracle::solve_reference(&obj, &[0.0; 2], 1e-24, 100_000).unwrap();
        assert!(c.heterogeneity(r.value).unwrap() > 0.0);
    }
}
