//! `spawnwatch`: simulate spawn tanks, run detectors, evaluate, analyze,
//! report, manage annotation rounds and serve the monitoring API.
//!
//! Every flag marked below can also be set through its environment variable:
//!
//! | flag          | variable               |
//! |---------------|------------------------|
//! | `--seed`      | `SPAWNWATCH_SEED`      |
//! | `--scenario`  | `SPAWNWATCH_SCENARIO`  |
//! | `--out`       | `SPAWNWATCH_OUT`       |
//! | `--detector`  | `SPAWNWATCH_DETECTOR`  |
//! | `--config`    | `SPAWNWATCH_CONFIG`    |
//!
//! `SPAWNWATCH_TOKEN` sets the API write token and `RUST_LOG` the log filter.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod analyze;
mod annotate;
mod config;
mod detect;
mod eval;
mod output;
mod plan;
mod report;
mod serve;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use crate::config::{Config, Scenario};
use crate::plan::{Manifest, Plan};

#[derive(Debug, Parser)]
#[command(name = "spawnwatch", version, about = "Coral spawn monitoring workflows")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, env = "SPAWNWATCH_SEED")]
    seed: Option<u64>,
    /// Scenario TOML (tank, cadence, duration).
    #[arg(long, global = true, env = "SPAWNWATCH_SCENARIO")]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "SPAWNWATCH_OUT")]
    out: Option<PathBuf>,
    /// `oracle`, `noisy` or `reference`, optionally bound with `:surface` or `:subsurface`.
    #[arg(long, global = true, env = "SPAWNWATCH_DETECTOR")]
    detector: Option<String>,
    /// Tool configuration TOML (series, matching, noise, labor, fleet).
    #[arg(long, global = true, env = "SPAWNWATCH_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a tank and write truth records (and optional renders).
    Simulate {
        /// Overrides the scenario duration.
        #[arg(long)]
        duration_s: Option<f64>,
        /// Render frames with the default raster settings if the scenario has none.
        #[arg(long)]
        render: bool,
    },
    /// Run a detector over a simulated run.
    Detect { run: PathBuf },
    /// Evaluate detections against truth.
    Eval {
        run: Option<PathBuf>,
        /// Aggregate the published per-class table instead of a run.
        #[arg(long)]
        published: bool,
    },
    /// Build fertilization and tank-count series from detections.
    Analyze {
        run: PathBuf,
        /// Manual-count log; defaults to the run's manual_counts.jsonl.
        #[arg(long)]
        manual: Option<PathBuf>,
        /// Pairing tolerance for RMSE, seconds.
        #[arg(long, default_value_t = 600.0)]
        tolerance_s: f64,
    },
    /// Labor-savings report, plus a harvest plan when an analyzed run is given.
    Report(report::ReportArgs),
    /// Start the coordinator and HTTP API, optionally with simulated units.
    Serve(serve::ServeArgs),
    /// Annotation round management.
    #[command(subcommand)]
    Annotate(annotate::AnnotateCommand),
    /// Re-execute the plan recorded in a manifest.
    Rerun { manifest: PathBuf },
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn load_scenario(path: Option<&PathBuf>) -> Result<Scenario> {
    match path {
        Some(p) => Scenario::load(p),
        None => Ok(Scenario::default()),
    }
}

fn resolve(cli: Cli) -> Result<Plan> {
    let g = cli.global;
    let seed = g.seed.unwrap_or(0);
    let config = load_config(g.config.as_ref())?;
    let out_or = |dir: &PathBuf| g.out.clone().unwrap_or_else(|| dir.clone());
    Ok(match cli.command {
        Command::Simulate { duration_s, render } => {
            let mut scenario = load_scenario(g.scenario.as_ref())?;
            if let Some(d) = duration_s {
                scenario.duration_s = d;
            }
            if render && scenario.render.is_none() {
                scenario.render = Some(Default::default());
            }
            scenario.validate()?;
            let Some(out) = g.out.clone() else {
                bail!("simulate needs --out (or SPAWNWATCH_OUT)");
            };
            Plan::Simulate(simulate::SimulatePlan { scenario, seed, out })
        }
        Command::Detect { run } => Plan::Detect(detect::DetectPlan {
            out: out_or(&run),
            run,
            detector: g.detector.clone().unwrap_or_else(|| "oracle".into()).parse()?,
            seed,
            noise: config.noise,
            reference: config.reference,
        }),
        Command::Eval { run, published } => {
            let out = match (&g.out, &run) {
                (Some(o), _) => o.clone(),
                (None, Some(r)) => r.clone(),
                (None, None) => bail!("eval needs a run directory or --out"),
            };
            if run.is_none() && !published {
                bail!("eval needs a run directory unless --published is given");
            }
            Plan::Eval(eval::EvalPlan {
                run,
                published,
                matching: config.matching,
                out,
            })
        }
        Command::Analyze {
            run,
            manual,
            tolerance_s,
        } => Plan::Analyze(analyze::AnalyzePlan {
            out: out_or(&run),
            run,
            manual,
            tolerance_s,
            series: config.series,
        }),
        Command::Report(args) => report::resolve(args, &config, g.out.clone())?,
        Command::Serve(args) => {
            let scenario = load_scenario(g.scenario.as_ref())?;
            serve::resolve(args, config, scenario, seed, g.out.clone())?
        }
        Command::Annotate(cmd) => annotate::resolve(cmd, seed, g.out.clone())?,
        Command::Rerun { manifest } => {
            let text = std::fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let m: Manifest =
                serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", manifest.display()))?;
            if m.tool != plan::TOOL {
                bail!("{} was not written by {}", manifest.display(), plan::TOOL);
            }
            let mut plan = m.plan;
            if let Some(out) = g.out {
                plan.set_out(out);
            }
            plan
        }
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match resolve(cli).and_then(plan::execute) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
