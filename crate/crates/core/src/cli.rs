//! Command-line front end. Exit codes: 0 clean, 1 error, 2 completed with
//! flagged steps or audit findings, 3 failed verification assertion.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::ev::{EVClassConfig, ScenarioConfig};
use crate::plot::{dual_decrease_series, error_bound_series, trace_series, Figure, PlotSeries};
use crate::sim::{audit_steps, read_trace_file, run, write_trace_file, RunSummary};
use crate::verify::{verify_dual_decrease, verify_error_bound};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FLAGGED: i32 = 2;
pub const EXIT_ASSERTION: i32 = 3;

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "INCENTIVE_MPC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "incentive-mpc", version, about = "Incentive-based hierarchical MPC for EV charging")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassArg {
    Small,
    Large,
}

impl ClassArg {
    fn config(self) -> EVClassConfig {
        match self {
            ClassArg::Small => EVClassConfig::small(),
            ClassArg::Large => EVClassConfig::large(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-loop simulation; writes the trace CSV and a JSON run summary.
    Run {
        /// Scenario TOML (built-in default when omitted).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Trace CSV; the summary goes to the same stem with `.summary.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Samples random prices and checks the follower error bound.
    VerifyBound {
        #[arg(long, value_enum, default_value = "large")]
        class: ClassArg,
        #[arg(long, default_value_t = 20)]
        members: usize,
        /// Comma-separated SoC half-ranges.
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09,0.1")]
        dy0_grid: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 12)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scatter and bound-line CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the audited incentive iteration and checks the dual decrease.
    VerifyDualDecrease {
        #[arg(long, value_enum, default_value = "large")]
        class: ClassArg,
        #[arg(long, default_value_t = 200)]
        members: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 30)]
        iterations: usize,
        #[arg(long, default_value_t = 12)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-iteration (actual, surrogate) CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extracts one figure table from a trace.
    PlotData {
        #[arg(long)]
        trace: PathBuf,
        /// error-bound, dual-decrease, aggregate-consumption, generation or storage.
        #[arg(long)]
        figure: Figure,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recomputes every constraint of a trace and prints the report as JSON.
    Audit {
        #[arg(long)]
        trace: PathBuf,
        /// Scenario the trace was produced with (built-in default when omitted).
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// `INCENTIVE_MPC_THREADS` wins over the flag.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV} must be a count, got `{v}`"))),
        Err(_) => Ok(flag),
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    if let Some(n) = thread_count(cli.threads)? {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Run { scenario, out, seed, steps } => cmd_run(scenario.as_deref(), &out, seed, steps),
        Command::VerifyBound { class, members, dy0_grid, trials, horizon, seed, out } => {
            let report = verify_error_bound(&class.config(), members, &dy0_grid, trials, horizon, seed)?;
            if let Some(p) = out {
                write_series(&error_bound_series(&report), &p)?;
            }
            let bad = report.violations();
            println!("samples: {}  violations: {}", report.samples.len(), bad.len());
            for v in &bad {
                eprintln!(
                    "bound exceeded: dy0 = {}, trial = {}, error = {:.6e} > {:.6e}",
                    v.dy0, v.trial, v.error, v.bound
                );
            }
            Ok(if bad.is_empty() { EXIT_OK } else { EXIT_ASSERTION })
        }
        Command::VerifyDualDecrease { class, members, trials, iterations, horizon, seed, out } => {
            let report = verify_dual_decrease(&class.config(), members, trials, iterations, horizon, seed)?;
            if let Some(p) = out {
                write_series(&dual_decrease_series(&report), &p)?;
            }
            let bad = report.violations();
            println!(
                "iterations audited: {}  min(actual - surrogate): {:.3e}  violations: {}",
                report.samples.len(),
                report.min_slack,
                bad.len()
            );
            for v in &bad {
                eprintln!(
                    "decrease short: trial {}, iteration {}: {:.6e} < {:.6e}",
                    v.trial, v.iteration, v.actual, v.surrogate
                );
            }
            Ok(if bad.is_empty() { EXIT_OK } else { EXIT_ASSERTION })
        }
        Command::PlotData { trace, figure, out } => {
            let steps = read_trace_file(&trace)?;
            write_series(&trace_series(figure, &steps)?, &out)?;
            Ok(EXIT_OK)
        }
        Command::Audit { trace, scenario } => {
            let cfg = load_scenario(scenario.as_deref())?;
            let steps = read_trace_file(&trace)?;
            let report = audit_steps(&steps, &cfg);
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.passed() { EXIT_OK } else { EXIT_FLAGGED })
        }
    }
}

pub fn load_scenario(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::load(p),
        None => Ok(ScenarioConfig::default()),
    }
}

/// `trace.csv` → `trace.summary.json`.
pub fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}

fn cmd_run(scenario: Option<&Path>, out: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<i32> {
    let cfg = load_scenario(scenario)?;
    let seed = seed.unwrap_or(cfg.seed);
    let steps = steps.unwrap_or(cfg.steps);
    let trace = run(&cfg, steps, seed)?;
    write_trace_file(&trace.steps, out)?;
    let summary = RunSummary::new(&trace, &cfg, seed);
    std::fs::write(summary_path(out), summary.to_json()? + "\n")?;
    println!(
        "steps: {}  violations: {}  mean iterations: {:.2}  full charged: {:?}",
        summary.steps,
        summary.audit.violations.len(),
        summary.mean_iterations,
        summary.full_charged
    );
    let flagged = trace.flagged() || !summary.audit.passed();
    Ok(if flagged { EXIT_FLAGGED } else { EXIT_OK })
}

fn write_series(series: &PlotSeries, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    series.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}
