//! Browser demo: small sketched-training experiments computed in wasm and
//! returned as JSON for a canvas page.

use std::sync::Arc;

use mast_core::data::{self, Dataset, SyntheticSpec};
use mast_core::objective::{AbcEstimator, LogisticLoss, MastProblem};
use mast_core::oracle::{self, LossObjective, SmoothObjective, TildeObjective};
use mast_core::sketch::SketchDistribution;
use mast_core::solvers::{self, Method, SolverConfig, StepSizeRule};
use mast_core::{rng, Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const DIM: usize = 10;
const ROWS: usize = 400;
const KAPPA: f64 = 100.0;
const SUPPORT_LIMIT: u128 = 1 << 12;
const TOL: f64 = 1e-10;

/// Planted sparse classification data, split 70/30 into train and test.
pub struct Demo {
    ds: Dataset,
    test: Vec<usize>,
    loss: Arc<LogisticLoss>,
}

impl Demo {
    pub fn new(seed: u64) -> Result<Self> {
        let spec = SyntheticSpec { n: ROWS, d: DIM, density: 0.3, noise: 0.5, positive_fraction: 0.5, seed };
        let ds = data::synthetic(spec)?;
        let split = data::split(&ds, &[0.7, 0.3], seed)?;
        let (a, b) = ds.subset(split.train())?;
        let loss = Arc::new(LogisticLoss::with_condition_number(a, b, KAPPA)?);
        Ok(Self { test: split.test().to_vec(), ds, loss })
    }

    pub fn problem(&self, k: usize) -> Result<MastProblem> {
        MastProblem::unshifted(self.loss.clone(), SketchDistribution::rand_k(DIM, k)?)
    }

    fn test_accuracy(&self, x: &[f64]) -> Result<f64> {
        data::accuracy(&self.ds, &self.test, x)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub multiplier: f64,
    pub gamma: f64,
    /// `(t, f~(x^t))`, with the optimal value subtracted.
    pub points: Vec<(u64, f64)>,
    pub diverged: bool,
}

/// Sketched objective gap along SGD runs with the base step scaled by each multiplier.
pub fn gamma_sweep(k: usize, multipliers: &[f64], iterations: u64, seed: u64) -> Result<Vec<Curve>> {
    let demo = Demo::new(seed)?;
    let p = demo.problem(k)?;
    let tilde = TildeObjective::new(&p, SUPPORT_LIMIT)?;
    let best = oracle::solve_reference(&tilde, &[0.0; DIM], TOL, oracle::REFERENCE_MAX_ITER)?.value;
    let base = solvers::step_size(StepSizeRule::StronglyConvex, p.constants(), p.loss())?;
    let every = (iterations / 60).max(1);
    multipliers
        .iter()
        .map(|&m| {
            let cfg = SolverConfig::new(Method::Dsgd { estimator: AbcEstimator::Exact }, base * m, iterations, seed);
            let mut points = Vec::new();
            let out = solvers::run(&p, cfg, vec![0.0; DIM], |s| {
                let st = s.state();
                if st.t % every == 0 || st.t == iterations {
                    points.push((st.t, tilde.value(&st.x)? - best));
                }
                Ok(())
            })?;
            Ok(Curve { multiplier: m, gamma: base * m, points, diverged: out.diverged.is_some() })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Robustness {
    /// Test accuracy of each sketched copy of the sketch-trained model.
    pub mast: Vec<f64>,
    /// Same sketches applied to the plain empirical risk minimizer.
    pub erm: Vec<f64>,
    pub mast_dense: f64,
    pub erm_dense: f64,
}

/// Test accuracy of `n` random sparsifications of both minimizers.
pub fn robustness(k: usize, n: usize, seed: u64) -> Result<Robustness> {
    let demo = Demo::new(seed)?;
    let p = demo.problem(k)?;
    let x0 = vec![0.0; DIM];
    let xd = oracle::solve_reference(&TildeObjective::new(&p, SUPPORT_LIMIT)?, &x0, TOL, oracle::REFERENCE_MAX_ITER)?.x;
    let xs = oracle::solve_reference(&LossObjective(p.loss()), &x0, TOL, oracle::REFERENCE_MAX_ITER)?.x;
    let mut r = rng::derive(seed, &[rng::tag::ROBUSTNESS]);
    let (mut mast, mut erm) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let s = p.dist().sample(&mut r);
        mast.push(demo.test_accuracy(&p.sketched_point(&s, &xd)?)?);
        erm.push(demo.test_accuracy(&p.sketched_point(&s, &xs)?)?);
    }
    Ok(Robustness { mast, erm, mast_dense: demo.test_accuracy(&xd)?, erm_dense: demo.test_accuracy(&xs)? })
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichRow {
    pub k: usize,
    pub f_star: f64,
    pub f_at_xd: f64,
    pub upper: f64,
}

/// Original loss at the sketched minimizer for every `K`, with both ends of its sandwich.
pub fn sandwich(seed: u64) -> Result<Vec<SandwichRow>> {
    let demo = Demo::new(seed)?;
    let x0 = vec![0.0; DIM];
    let xs = oracle::solve_reference(&LossObjective(demo.loss.as_ref()), &x0, TOL, oracle::REFERENCE_MAX_ITER)?.x;
    (1..=DIM)
        .map(|k| {
            let p = demo.problem(k)?;
            let xd = oracle::solve_reference(&TildeObjective::new(&p, SUPPORT_LIMIT)?, &x0, TOL, oracle::REFERENCE_MAX_ITER)?.x;
            let b = p.mast_sandwich_bounds(&xs, &xd)?;
            Ok(SandwichRow { k, f_star: b.lower, f_at_xd: b.f_at_xd, upper: b.upper })
        })
        .collect()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 || k > DIM {
        return Err(Error::Config(format!("k must be in 1..={DIM}, got {k}")));
    }
    Ok(())
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON array of curves; `multipliers` is comma-separated.
#[wasm_bindgen(js_name = gammaSweep)]
pub fn gamma_sweep_js(k: usize, multipliers: &str, iterations: u32, seed: u32) -> std::result::Result<String, JsError> {
    let ms: std::result::Result<Vec<f64>, _> = multipliers.split(',').map(|m| m.trim().parse::<f64>()).collect();
    let ms = ms.map_err(|e| JsError::new(&format!("multipliers: {e}")))?;
    to_js(check_k(k).and_then(|_| gamma_sweep(k, &ms, iterations.into(), seed.into())))
}

#[wasm_bindgen(js_name = robustness)]
pub fn robustness_js(k: usize, n: u32, seed: u32) -> std::result::Result<String, JsError> {
    to_js(check_k(k).and_then(|_| robustness(k, n as usize, seed.into())))
}

#[wasm_bindgen(js_name = sandwich)]
pub fn sandwich_js(seed: u32) -> std::result::Result<String, JsError> {
    to_js(sandwich(seed.into()))
}
