//! Experiment configuration, read from TOML.
//!
//! ```toml
//! name = "dsgd-rand1"
//!
//! [data]
//! fixture = "synthetic"          # or path = "a5a.libsvm"
//! fractions = [0.7, 0.18, 0.12]
//!
//! [loss]
//! kind = "logistic"
//! kappa = 1000.0                 # or lambda = 1e-3
//!
//! [sketch]
//! kind = "randk"
//! q = 0.5                        # or k = 50
//!
//! [solver]
//! method = "dsgd"
//! step = "strongly_convex"
//! iterations = 3000
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
    pub sketch: SketchConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub run: RunConfig,
    /// Nodes of a distributed run; node `i` trains on the `i`-th contiguous
    /// shard of the training rows.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<NodeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub intercept: bool,
}

fn default_fractions() -> Vec<f64> {
    vec![0.7, 0.18, 0.12]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    NonconvexLogistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Target condition number; sets the regularizer to `L0 / (kappa - 1)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftConfig {
    #[default]
    Zero,
    /// Whitespace-separated weights.
    File { path: PathBuf },
    /// Minimizer of the unsketched training loss.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SketchConfig {
    Identity,
    /// Keep `k` coordinates, or `round(q d)` of them.
    #[serde(rename = "randk")]
    RandK {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<f64>,
    },
    /// Keep each coordinate with probability `p`.
    Bernoulli { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Dsgd,
    Lsvrdsg,
    Spage,
    Distributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    StronglyConvex,
    Convex,
    Nonconvex,
    Lsvrdsg,
    LsvrdsgConvex,
    Spage,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: MethodKind,
    #[serde(default = "default_step")]
    pub step: StepKind,
    /// Step size for `step = "manual"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default = "one")]
    pub gamma_multiplier: f64,
    pub iterations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_batch: Option<usize>,
    /// Rows per inner gradient estimate of double sketched SGD; full batch
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
}

fn default_step() -> StepKind {
    StepKind::StronglyConvex
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Metric rows every this many iterations (plus the last one).
    #[serde(default = "fifty")]
    pub cadence: u64,
    /// Validation checkpoints for model selection in the robustness study.
    #[serde(default = "fifty")]
    pub checkpoint_every: u64,
    #[serde(default = "yes")]
    pub mast_metrics: bool,
    #[serde(default = "yes")]
    pub plot: bool,
    /// Output directory; defaults to `<root>/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seeds: default_seeds(), cadence: 50, checkpoint_every: 50, mast_metrics: true, plot: true, output_dir: None }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn fifty() -> u64 {
    50
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub sketch: SketchConfig,
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    GammaMultiplier,
    Q,
    Kappa,
    P,
    B,
}

impl std::str::FromStr for Axis {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gamma_multiplier" => Self::GammaMultiplier,
            "q" => Self::Q,
            "kappa" => Self::Kappa,
            "p" => Self::P,
            "b" => Self::B,
            _ => return Err(BenchError::Config(format!("unknown sweep axis {s:?}; expected gamma_multiplier, q, kappa, p or b"))),
        })
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Self::GammaMultiplier => "gamma_multiplier",
            Self::Q => "q",
            Self::Kappa => "kappa",
            Self::P => "p",
            Self::B => "b",
        }
    }
}

fn bad(field: &str, msg: impl std::fmt::Display) -> BenchError {
    BenchError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative data paths resolve against the config file
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        if let ShiftConfig::File { path: p } = &mut cfg.shift {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &cfg.run.output_dir {
            if p.is_relative() {
                cfg.run.output_dir = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    /// Canonical TOML, independent of the formatting of the source file.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a 64 of [`Self::canonical`].
    pub fn hash(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(self.canonical().as_bytes());
        h.finish()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(bad("name", "must be a non-empty file name"));
        }
        match (&self.data.fixture, &self.data.path) {
            (Some(_), Some(_)) | (None, None) => return Err(bad("data", "set exactly one of fixture and path")),
            (Some(f), None) if !crate::fixtures::DATASETS.contains(&f.as_str()) => {
                return Err(bad("data.fixture", format!("unknown fixture {f:?}; known: {:?}", crate::fixtures::DATASETS)))
            }
            _ => {}
        }
        let sum: f64 = self.data.fractions.iter().sum();
        if !(2..=3).contains(&self.data.fractions.len()) || self.data.fractions.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(bad("data.fractions", "need two or three positive fractions summing to 1"));
        }
        match (self.loss.kappa, self.loss.lambda) {
            (Some(k), None) if k > 1.0 => {}
            (Some(_), None) => return Err(bad("loss.kappa", "must exceed 1")),
            (None, Some(l)) if l >= 0.0 && l.is_finite() => {}
            (None, Some(_)) => return Err(bad("loss.lambda", "must be finite and >= 0")),
            _ => return Err(bad("loss", "set exactly one of kappa and lambda")),
        }
        if self.loss.kind == LossKind::NonconvexLogistic && self.loss.kappa.is_some() {
            return Err(bad("loss.kappa", "nonconvex_logistic has no condition number; set lambda"));
        }
        check_sketch("sketch", &self.sketch)?;
        let s = &self.solver;
        if !(s.gamma_multiplier > 0.0 && s.gamma_multiplier.is_finite()) {
            return Err(bad("solver.gamma_multiplier", "must be positive"));
        }
        match (s.step, s.gamma) {
            (StepKind::Manual, Some(g)) if g > 0.0 && g.is_finite() => {}
            (StepKind::Manual, _) => return Err(bad("solver.gamma", "manual step needs a positive gamma")),
            (_, Some(_)) => return Err(bad("solver.gamma", "only used with step = \"manual\"")),
            _ => {}
        }
        if let Some(p) = s.prob {
            if !(p > 0.0 && p <= 1.0) {
                return Err(bad("solver.prob", "must lie in (0, 1]"));
            }
        }
        let need = |v: Option<usize>, f: &str| v.filter(|&b| b >= 1).map(|_| ()).ok_or_else(|| bad(f, "required, >= 1"));
        match s.method {
            MethodKind::Dsgd => {
                if let Some(0) = s.subsample {
                    return Err(bad("solver.subsample", "must be >= 1"));
                }
            }
            MethodKind::Lsvrdsg => {
                s.prob.ok_or_else(|| bad("solver.prob", "required"))?;
                need(s.batch, "solver.batch")?;
            }
            MethodKind::Spage => {
                s.prob.ok_or_else(|| bad("solver.prob", "required"))?;
                need(s.batch, "solver.batch")?;
                need(s.small_batch, "solver.small_batch")?;
            }
            MethodKind::Distributed => {
                if self.nodes.is_empty() {
                    return Err(bad("nodes", "distributed runs need at least one node"));
                }
                if !matches!(s.step, StepKind::StronglyConvex | StepKind::Convex | StepKind::Nonconvex | StepKind::Manual) {
                    return Err(bad("solver.step", "distributed runs use strongly_convex, convex, nonconvex or manual"));
                }
            }
        }
        if s.method != MethodKind::Distributed && !self.nodes.is_empty() {
            return Err(bad("nodes", "only used with method = \"distributed\""));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            check_sketch(&format!("nodes[{i}].sketch"), &n.sketch)?;
        }
        if self.run.seeds.is_empty() {
            return Err(bad("run.seeds", "must not be empty"));
        }
        if self.run.cadence == 0 || self.run.checkpoint_every == 0 {
            return Err(bad("run", "cadence and checkpoint_every must be >= 1"));
        }
        Ok(())
    }

    /// Copy with one sweep parameter replaced.
    pub fn with_axis(&self, axis: Axis, value: f64) -> Result<Self> {
        let mut c = self.clone();
        match axis {
            Axis::GammaMultiplier => c.solver.gamma_multiplier = value,
            Axis::Q => match &mut c.sketch {
                SketchConfig::RandK { k, q } => {
                    *k = None;
                    *q = Some(value);
                }
                SketchConfig::Bernoulli { p } => *p = value,
                SketchConfig::Identity => return Err(bad("sketch", "the q axis needs a randk or bernoulli sketch")),
            },
            Axis::Kappa => {
                c.loss.kappa = Some(value);
                c.loss.lambda = None;
            }
            Axis::P => c.solver.prob = Some(value),
            Axis::B => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(bad("b", format!("batch {value} is not a positive integer")));
                }
                c.solver.batch = Some(value as usize);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn check_sketch(field: &str, s: &SketchConfig) -> Result<()> {
    match s {
        SketchConfig::Identity => Ok(()),
        SketchConfig::RandK { k: Some(k), q: None } if *k >= 1 => Ok(()),
        SketchConfig::RandK { k: None, q: Some(q) } if *q > 0.0 && *q <= 1.0 => Ok(()),
        SketchConfig::RandK { .. } => Err(bad(field, "randk needs exactly one of k >= 1 and q in (0, 1]")),
        SketchConfig::Bernoulli { p } if *p > 0.0 && *p <= 1.0 => Ok(()),
        SketchConfig::Bernoulli { .. } => Err(bad(field, "bernoulli p must lie in (0, 1]")),
    }
}
