use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mast_bench::checks::{self, CheckOptions, Fault};
use mast_bench::config::{Axis, ExperimentConfig};
use mast_bench::error::{BenchError, Result};
use mast_bench::experiment::{self, Recording};
use mast_bench::output;

/// Sketched-training experiments and verification.
///
/// Outputs go to `run.output_dir` of the config, or `$MAST_OUT_DIR/<name>`
/// (default `./mast-out/<name>`).
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train over all configured seeds; writes runs.csv, summary.csv and plot.svg.
    Run { config: PathBuf },
    /// One run set per value of a parameter.
    Sweep {
        config: PathBuf,
        /// gamma_multiplier, q, kappa, p or b
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Test accuracy of sketched copies of the trained and the plain model.
    Robustness {
        config: PathBuf,
        /// Number of sampled sketches.
        #[arg(long)]
        n: usize,
        /// Weights file to use instead of training.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the verification battery.
    Verify {
        /// Only checks whose id contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Corrupt a constant to demonstrate failure (halve-lf).
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let p = experiment::prepare(&cfg)?;
            let runs = p.run_all(Recording::METRICS)?;
            for r in &runs {
                if let Some((t, norm)) = r.diverged {
                    eprintln!("seed {}: diverged at iteration {t} (|x| = {norm:e})", r.seed);
                }
            }
            announce(&output::write_run(&p, &runs, &output::experiment_dir(&cfg))?);
        }
        Cmd::Sweep { config, axis, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axis: Axis = axis.parse()?;
            let cells = experiment::sweep(&cfg, axis, &values)?;
            for c in &cells {
                println!("{}={}: {}", axis.name(), c.value, output::cell_status(c).name());
            }
            let dir = output::experiment_dir(&cfg).join(format!("sweep-{}", axis.name()));
            announce(&output::write_sweep(&cfg, axis, &cells, &dir)?);
        }
        Cmd::Robustness { config, n, model } => {
            let cfg = ExperimentConfig::load(&config)?;
            let p = experiment::prepare(&cfg)?;
            let model = model.map(|m| experiment::read_weights(&m, p.problem.dim())).transpose()?;
            let r = experiment::robustness(&p, n, model)?;
            let (m, e) = (experiment::quantiles(&r.mast), experiment::quantiles(&r.erm));
            println!("median test accuracy: sketch-trained {:.4}, plain {:.4}", m[2], e[2]);
            announce(&output::write_robustness(&p, &r, &output::experiment_dir(&cfg).join("robustness"))?);
        }
        Cmd::Verify { filter, inject_fault } => {
            let fault = inject_fault.map(|f| f.parse::<Fault>()).transpose()?;
            let dir = output::output_root().join("verify");
            let opts = CheckOptions { fault, scratch: dir.join("scratch") };
            let results = checks::run_checks(filter.as_deref(), &opts, |r| println!("{}", checks::report_line(r)));
            announce(&[output::write_file(&dir, "report.csv", &checks::report_csv(&results))?]);
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Err(BenchError::ChecksFailed(failed));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
