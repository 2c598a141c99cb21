//! Per-iteration metric rows and their evaluation.

use crate::data::{accuracy, Dataset};
use crate::error::Result;
use crate::linalg;
use crate::objective::MastProblem;
use crate::rng;
use crate::sketch::{SketchSample, DEFAULT_SUPPORT_LIMIT};

/// Column order of [`MetricRow::to_csv`].
pub const HEADER: &str = "seed,t,erm_loss,grad_norm_sq_erm,mast_loss,mast_loss_stderr,grad_norm_sq_mast,val_acc,test_acc,comm_nnz,diverged";

/// Monte-Carlo sample count used when the sketch support is too large to enumerate.
pub const MONTE_CARLO_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub seed: u64,
    pub t: u64,
    pub erm_loss: f64,
    pub grad_norm_sq_erm: f64,
    pub mast_loss: Option<f64>,
    pub mast_loss_stderr: Option<f64>,
    pub grad_norm_sq_mast: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub comm_nnz: Option<u64>,
    pub diverged: bool,
}

/// Shortest round-trip text, in exponent form outside `[1e-4, 1e15)`.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

impl MetricRow {
    /// Comma-separated, shortest round-trip float formatting, empty cells for
    /// absent values.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.t,
            format_float(self.erm_loss),
            format_float(self.grad_norm_sq_erm),
            opt(self.mast_loss),
            opt(self.mast_loss_stderr),
            opt(self.grad_norm_sq_mast),
            opt(self.val_acc),
            opt(self.test_acc),
            self.comm_nnz.map(|c| c.to_string()).unwrap_or_default(),
            u8::from(self.diverged)
        )
    }
}

/// How the sketched objective is logged.
#[derive(Debug, Clone)]
pub enum MastMode {
    Off,
    /// Exact expectation over an enumerated support.
    Exact(Vec<(SketchSample, f64)>),
    /// Sample mean of this many sketched losses, with its standard error.
    MonteCarlo(usize),
}

/// Evaluates metric rows for iterates of one problem.
pub struct Evaluator<'a> {
    problem: &'a MastProblem,
    mast: MastMode,
    data: Option<(&'a Dataset, Option<&'a [usize]>, Option<&'a [usize]>)>,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a MastProblem) -> Self {
        Self { problem, mast: MastMode::Off, data: None }
    }

    /// Enumerates when the support has at most `DEFAULT_SUPPORT_LIMIT`
    /// members, else samples.
    pub fn with_mast(mut self) -> Result<Self> {
        self.mast = if self.problem.dist().support_size() <= DEFAULT_SUPPORT_LIMIT {
            MastMode::Exact(self.problem.dist().enumerate_support(DEFAULT_SUPPORT_LIMIT)?)
        } else {
            MastMode::MonteCarlo(MONTE_CARLO_SAMPLES)
        };
        Ok(self)
    }

    pub fn with_mode(mut self, mode: MastMode) -> Self {
        self.mast = mode;
        self
    }

    /// Accuracy on the validation and test rows of `ds`.
    pub fn with_accuracy(mut self, ds: &'a Dataset, val: Option<&'a [usize]>, test: Option<&'a [usize]>) -> Self {
        self.data = Some((ds, val, test));
        self
    }

    pub fn mode(&self) -> &MastMode {
        &self.mast
    }

    /// Metrics at `x`. Monte-Carlo draws use the stream `(seed, MONTE_CARLO, t)`.
    pub fn evaluate(&self, seed: u64, t: u64, x: &[f64]) -> Result<MetricRow> {
        let loss = self.problem.loss();
        let (mast_loss, mast_loss_stderr, grad_norm_sq_mast) = match &self.mast {
            MastMode::Off => (None, None, None),
            MastMode::Exact(sup) => (
                Some(self.problem.tilde_value_over(sup, x)?),
                None,
                Some(linalg::norm_sq(&self.problem.tilde_gradient_over(sup, x)?)),
            ),
            MastMode::MonteCarlo(n) => {
                let (m, se) = self.problem.monte_carlo_tilde_value(x, *n, &mut rng::derive(seed, &[rng::tag::MONTE_CARLO, t]))?;
                (Some(m), Some(se), None)
            }
        };
        let (val_acc, test_acc) = match self.data {
            Some((ds, val, test)) => (val.map(|i| accuracy(ds, i, x)).transpose()?, test.map(|i| accuracy(ds, i, x)).transpose()?),
            None => (None, None),
        };
        Ok(MetricRow {
            seed,
            t,
            erm_loss: loss.value(x),
            grad_norm_sq_erm: linalg::norm_sq(&loss.gradient(x)),
            mast_loss,
            mast_loss_stderr,
            grad_norm_sq_mast,
            val_acc,
            test_acc,
            comm_nnz: None,
            diverged: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::QuadraticLoss;
    use crate::sketch::SketchDistribution;
    use std::sync::Arc;

    #[test]
    fn csv_row_layout() {
        let r = MetricRow {
            seed: 3,
            t: 10,
            erm_loss: 0.5,
            grad_norm_sq_erm: 1e-20,
            mast_loss: Some(0.75),
            mast_loss_stderr: None,
            grad_norm_sq_mast: None,
            val_acc: None,
            test_acc: Some(0.875),
            comm_nnz: Some(4),
            diverged: false,
        };
        assert_eq!(r.to_csv(), "3,10,0.5,1e-20,0.75,,,,0.875,4,0");
        assert_eq!(format_float(-2.5e17), "-2.5e17");
        assert_eq!(format_float(f64::NAN), "NaN");
        for v in [1e-300, 0.1 + 0.2, 123456.789, 7e15] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(HEADER.split(',').count(), r.to_csv().split(',').count());
    }

    #[test]
    fn exact_and_sampled_modes() {
        let q = QuadraticLoss::isotropic(vec![1.0; 4], 0.0).unwrap();
        let p = MastProblem::unshifted(Arc::new(q), SketchDistribution::rand_k(4, 2).unwrap()).unwrap();
        let x = [0.5, 0.0, 2.0, 1.0];
        let exact = Evaluator::new(&p).with_mast().unwrap();
        assert!(matches!(exact.mode(), MastMode::Exact(s) if s.len() == 6));
        let row = exact.evaluate(0, 0, &x).unwrap();
        assert_eq!(row.mast_loss.unwrap(), p.exact_tilde_value(&x, 100).unwrap());
        let mc = Evaluator::new(&p).with_mode(MastMode::MonteCarlo(4000)).evaluate(1, 2, &x).unwrap();
        let (m, se) = (mc.mast_loss.unwrap(), mc.mast_loss_stderr.unwrap());
        assert!((m - row.mast_loss.unwrap()).abs() <= 5.0 * se);
        assert_eq!(mc, Evaluator::new(&p).with_mode(MastMode::MonteCarlo(4000)).evaluate(1, 2, &x).unwrap());
    }
}
