//! CSV and SVG artifacts. Every file starts with `#` lines carrying the tool
//! version and the config hash.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use mast_core::record::{format_float, MetricRow, HEADER};

use crate::config::{Axis, ExperimentConfig};
use crate::error::{BenchError, Result};
use crate::experiment::{quantiles, Cell, Prepared, Robustness, SeedRun};
use crate::plot::{line_plot, Series};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable naming the output root.
pub const OUT_DIR_VAR: &str = "MAST_OUT_DIR";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("mast-out"))
}

/// `run.output_dir`, else `<root>/<name>`.
pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.run.output_dir.clone().unwrap_or_else(|| output_root().join(&cfg.name))
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| BenchError::io(&path, e))?;
    Ok(path)
}

/// Ordered `key=value` comment lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header(Vec<(String, String)>);

impl Header {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self::default().with("config", &cfg.name).with("config_hash", format!("{:016x}", cfg.hash()))
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    /// Data, constants and step size of a prepared experiment.
    pub fn of(p: &Prepared) -> Self {
        let c = p.problem.constants();
        let loss = p.problem.loss();
        let mut h = Self::new(&p.cfg)
            .with("dataset_hash", format!("{:016x}", p.dataset.content_hash()))
            .with("n", p.dataset.n())
            .with("n_train", p.split.train().len())
            .with("d", p.problem.dim())
            .with("L_f", format_float(loss.smoothness()))
            .with("mu_f", format_float(loss.strong_convexity()))
            .with("L_D", format_float(c.l_d))
            .with("mu_D", format_float(c.mu_d))
            .with("L_S_max", format_float(c.l_s_max));
        if let Some(cl) = &p.cluster {
            h = h.with("nodes", cl.len()).with("D_max", format_float(cl.d_max()));
        }
        h.with("gamma", format_float(p.gamma))
    }

    pub fn render(&self) -> String {
        let mut s = format!("# mast-bench {VERSION}\n");
        for (k, v) in &self.0 {
            let _ = writeln!(s, "# {k}={v}");
        }
        s
    }
}

/// Columns averaged in summaries.
pub const SUMMARY_METRICS: [&str; 7] = ["erm_loss", "grad_norm_sq_erm", "mast_loss", "grad_norm_sq_mast", "val_acc", "test_acc", "comm_nnz"];

pub fn metric(r: &MetricRow, name: &str) -> Option<f64> {
    match name {
        "erm_loss" => Some(r.erm_loss),
        "grad_norm_sq_erm" => Some(r.grad_norm_sq_erm),
        "mast_loss" => r.mast_loss,
        "grad_norm_sq_mast" => r.grad_norm_sq_mast,
        "val_acc" => r.val_acc,
        "test_acc" => r.test_acc,
        "comm_nnz" => r.comm_nnz.map(|c| c as f64),
        _ => None,
    }
}

/// Mean and sample standard deviation of the rows at one `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub t: u64,
    pub n: usize,
    /// Per [`SUMMARY_METRICS`] entry; `None` when no row has the value.
    pub stats: Vec<Option<(f64, f64)>>,
    pub diverged: usize,
}

impl SummaryRow {
    pub fn mean(&self, name: &str) -> Option<f64> {
        let i = SUMMARY_METRICS.iter().position(|m| *m == name)?;
        self.stats[i].map(|s| s.0)
    }

    pub fn std(&self, name: &str) -> Option<f64> {
        let i = SUMMARY_METRICS.iter().position(|m| *m == name)?;
        self.stats[i].map(|s| s.1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.t, self.n);
        for st in &self.stats {
            match st {
                Some((m, sd)) => {
                    let _ = write!(s, ",{},{}", format_float(*m), format_float(*sd));
                }
                None => s.push_str(",,"),
            }
        }
        let _ = write!(s, ",{}", self.diverged);
        s
    }
}

pub fn summary_header() -> String {
    let mut s = String::from("t,n");
    for m in SUMMARY_METRICS {
        let _ = write!(s, ",{m}_mean,{m}_std");
    }
    s + ",diverged"
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Groups rows by `t`, keeping seed order within each group.
pub fn summarize(runs: &[SeedRun]) -> Vec<SummaryRow> {
    let mut by_t: BTreeMap<u64, Vec<&MetricRow>> = BTreeMap::new();
    for r in runs {
        for row in &r.rows {
            by_t.entry(row.t).or_default().push(row);
        }
    }
    by_t.into_iter()
        .map(|(t, rows)| {
            let stats = SUMMARY_METRICS
                .iter()
                .map(|m| {
                    let v: Vec<f64> = rows.iter().filter_map(|r| metric(r, m)).collect();
                    (!v.is_empty()).then(|| mean_std(&v))
                })
                .collect();
            SummaryRow { t, n: rows.len(), stats, diverged: rows.iter().filter(|r| r.diverged).count() }
        })
        .collect()
}

pub fn runs_csv(h: &Header, runs: &[SeedRun]) -> String {
    let mut s = h.render();
    s.push_str(HEADER);
    s.push('\n');
    for r in runs {
        for row in &r.rows {
            s.push_str(&row.to_csv());
            s.push('\n');
        }
    }
    s
}

pub fn summary_csv(h: &Header, summary: &[SummaryRow]) -> String {
    let mut s = h.render();
    s.push_str(&summary_header());
    s.push('\n');
    for r in summary {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// The sketched loss when every summary row has it, else the plain loss.
pub fn tracked_metric(summary: &[SummaryRow]) -> &'static str {
    if !summary.is_empty() && summary.iter().all(|r| r.mean("mast_loss").is_some()) {
        "mast_loss"
    } else {
        "erm_loss"
    }
}

fn series(label: String, summary: &[SummaryRow], m: &str) -> Series {
    Series { label, points: summary.iter().filter_map(|r| Some((r.t as f64, r.mean(m)?, r.std(m)?))).collect() }
}

/// Writes `runs.csv`, `summary.csv`, `final_models.txt` and, when enabled,
/// `plot.svg`.
pub fn write_run(p: &Prepared, runs: &[SeedRun], dir: &Path) -> Result<Vec<PathBuf>> {
    let h = Header::of(p);
    let summary = summarize(runs);
    let mut out = vec![write_file(dir, "runs.csv", &runs_csv(&h, runs))?, write_file(dir, "summary.csv", &summary_csv(&h, &summary))?];
    let mut models = h.render();
    for r in runs {
        let _ = writeln!(models, "# seed={} t={}", r.seed, r.final_t);
        models.push_str(&crate::experiment::format_weights(&r.final_x));
    }
    out.push(write_file(dir, "final_models.txt", &models)?);
    if p.cfg.run.plot {
        let m = tracked_metric(&summary);
        let title = format!("{} (mean ± std over {} seeds)", p.cfg.name, runs.len());
        out.push(write_file(dir, "plot.svg", &line_plot(&title, "iteration", m, &[series(m.into(), &summary, m)]))?);
    }
    Ok(out)
}

/// Outcome of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Converged,
    /// Tracked loss at the end is not below its value at half the run.
    Stagnated,
    Diverged,
}

impl CellStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::Stagnated => "stagnated",
            Self::Diverged => "diverged",
        }
    }
}

/// `(loss at T/2, loss at T)` of the mean trajectory, using the last
/// recorded `t` at or before each.
pub fn halves(summary: &[SummaryRow], m: &str, iterations: u64) -> Option<(f64, f64)> {
    let at = |t: u64| summary.iter().rfind(|r| r.t <= t).and_then(|r| r.mean(m));
    Some((at(iterations / 2)?, at(iterations)?))
}

pub fn cell_status(cell: &Cell) -> CellStatus {
    if cell.diverged_seeds() > 0 {
        return CellStatus::Diverged;
    }
    let summary = summarize(&cell.runs);
    match halves(&summary, tracked_metric(&summary), cell.cfg.solver.iterations) {
        Some((half, end)) if end < half => CellStatus::Converged,
        _ => CellStatus::Stagnated,
    }
}

/// Writes `sweep_runs.csv`, `sweep_summary.csv`, `sweep_cells.csv` and
/// optionally `sweep.svg`, all in long format keyed by `(axis, value)`.
pub fn write_sweep(cfg: &ExperimentConfig, axis: Axis, cells: &[Cell], dir: &Path) -> Result<Vec<PathBuf>> {
    let values: Vec<String> = cells.iter().map(|c| format_float(c.value)).collect();
    let h = Header::new(cfg).with("axis", axis.name()).with("values", values.join(" ")).render();
    let (mut runs, mut summ, mut cells_csv) = (h.clone(), h.clone(), h);
    runs.push_str(&format!("axis,value,gamma,{HEADER}\n"));
    summ.push_str(&format!("axis,value,gamma,{}\n", summary_header()));
    cells_csv.push_str("axis,value,gamma,seeds,diverged_seeds,first_divergence_t,metric,loss_half,loss_final,status\n");
    let mut plot = Vec::new();
    for c in cells {
        let key = format!("{},{},{}", axis.name(), format_float(c.value), format_float(c.gamma));
        for r in &c.runs {
            for row in &r.rows {
                let _ = writeln!(runs, "{key},{}", row.to_csv());
            }
        }
        let summary = summarize(&c.runs);
        for r in &summary {
            let _ = writeln!(summ, "{key},{}", r.to_csv());
        }
        let m = tracked_metric(&summary);
        let (half, end) = halves(&summary, m, c.cfg.solver.iterations).unwrap_or((f64::NAN, f64::NAN));
        let first = c.runs.iter().filter_map(|r| r.diverged.map(|d| d.0)).min();
        let _ = writeln!(
            cells_csv,
            "{key},{},{},{},{m},{},{},{}",
            c.runs.len(),
            c.diverged_seeds(),
            first.map(|t| t.to_string()).unwrap_or_default(),
            format_float(half),
            format_float(end),
            cell_status(c).name()
        );
        plot.push(series(format!("{}={}", axis.name(), format_float(c.value)), &summary, m));
    }
    let mut out = vec![
        write_file(dir, "sweep_runs.csv", &runs)?,
        write_file(dir, "sweep_summary.csv", &summ)?,
        write_file(dir, "sweep_cells.csv", &cells_csv)?,
    ];
    if cfg.run.plot {
        let title = format!("{} sweep over {}", cfg.name, axis.name());
        out.push(write_file(dir, "sweep.svg", &line_plot(&title, "iteration", "mean loss", &plot))?);
    }
    Ok(out)
}

/// Writes `robustness.csv` (one row per sketch) and
/// `robustness_summary.csv` (quantiles per model).
pub fn write_robustness(p: &Prepared, r: &Robustness, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut h = Header::of(p).with("sketch_seed", r.seed).with("sketches", r.mast.len());
    h = match r.checkpoint {
        Some(t) => h.with("mast_model", format!("checkpoint t={t}")),
        None => h.with("mast_model", "file"),
    };
    let head = h.render();
    let mut samples = head.clone() + "sketch,mast_test_acc,erm_test_acc\n";
    for (i, (a, b)) in r.mast.iter().zip(&r.erm).enumerate() {
        let _ = writeln!(samples, "{i},{},{}", format_float(*a), format_float(*b));
    }
    let mut summary = head + "model,min,q25,median,q75,max\n";
    for (name, v) in [("mast", &r.mast), ("erm", &r.erm)] {
        let q = quantiles(v).map(format_float);
        let _ = writeln!(summary, "{name},{}", q.join(","));
    }
    Ok(vec![write_file(dir, "robustness.csv", &samples)?, write_file(dir, "robustness_summary.csv", &summary)?])
}
