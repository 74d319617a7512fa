use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use spawnwatch_core::fleet::{
    router, serve_units, ApiConfig, ApiState, Clock, Coordinator, FleetTopology, SimClock, SimFleet, SimFleetConfig,
    SimSummary, TankSummary, WallClock,
};
use tokio::net::TcpListener;

use crate::config::{Config, Scenario};
use crate::output;
use crate::plan::Plan;

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Drive the coordinator with simulated tanks and units on a simulated clock.
    #[arg(long)]
    pub sim: bool,
    /// Simulated seconds per wall second; as fast as possible when omitted.
    #[arg(long, requires = "sim")]
    pub pace: Option<f64>,
    /// Simulated duration in hours (defaults to the scenario duration).
    #[arg(long, requires = "sim")]
    pub hours: Option<f64>,
    /// Stop once the simulation has finished instead of serving until interrupted.
    #[arg(long, requires = "sim")]
    pub exit_after_sim: bool,
    /// Evaluation report (JSON) to expose at /api/v1/reports/eval.
    #[arg(long)]
    pub eval_report: Option<PathBuf>,
    /// HTTP API listen address (overrides `fleet.api_addr`).
    #[arg(long)]
    pub api_addr: Option<String>,
    /// Unit TCP listen address (overrides `fleet.unit_addr`).
    #[arg(long)]
    pub unit_addr: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServePlan {
    pub config: Config,
    pub scenario: Scenario,
    pub seed: u64,
    pub sim: bool,
    pub pace: Option<f64>,
    pub duration_s: f64,
    pub exit_after_sim: bool,
    pub eval_report: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ServeSummary {
    sim: Option<SimSummary>,
    tanks: Vec<TankSummary>,
}

pub fn resolve(
    args: ServeArgs,
    mut config: Config,
    scenario: Scenario,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<Plan> {
    if let Some(a) = args.api_addr {
        config.fleet.api_addr = a;
    }
    if let Some(a) = args.unit_addr {
        config.fleet.unit_addr = a;
    }
    if let Some(p) = args.pace {
        if !(p > 0.0) {
            bail!("--pace must be > 0");
        }
    }
    let duration_s = args.hours.map_or(scenario.duration_s, |h| h * 3600.0);
    if !(duration_s >= 0.0) {
        bail!("--hours must be >= 0");
    }
    let Some(out) = out else {
        bail!("serve needs --out for its run directory");
    };
    Ok(Plan::Serve(Box::new(ServePlan {
        config,
        scenario,
        seed,
        sim: args.sim,
        pace: args.pace,
        duration_s,
        exit_after_sim: args.exit_after_sim,
        eval_report: args.eval_report,
        out,
    })))
}

pub fn run(plan: &ServePlan) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(plan))
}

async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        tracing::error!(error = %e, "cannot listen for interrupt");
        std::future::pending::<()>().await;
    }
}

async fn serve(plan: &ServePlan) -> Result<()> {
    let fleet = &plan.config.fleet;
    let topology = FleetTopology::uniform(fleet.tanks, fleet.units_per_tank);
    let sim_clock = plan.sim.then(|| Arc::new(SimClock::new(0.0)));
    let clock: Arc<dyn Clock> = match &sim_clock {
        Some(c) => c.clone(),
        None => Arc::new(WallClock::new()),
    };
    let coord = Coordinator::new(topology, fleet.coordinator, &plan.out, clock)?;
    if let Some(path) = &plan.eval_report {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        coord.set_eval_report(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?);
    }

    let token = std::env::var("SPAWNWATCH_TOKEN").ok().or_else(|| fleet.token.clone());
    let api = router(ApiState::new(
        coord.clone(),
        ApiConfig {
            token,
            labor: plan.config.labor,
        },
    ));
    let api_listener = TcpListener::bind(&fleet.api_addr)
        .await
        .with_context(|| format!("binding API address {}", fleet.api_addr))?;
    eprintln!("api listening on http://{}/api/v1", api_listener.local_addr()?);
    let api_task = tokio::spawn(async move { axum::serve(api_listener, api).await });

    let summary = if let Some(clock) = sim_clock {
        let sc = &plan.scenario;
        let cfg = SimFleetConfig {
            tank: sc.tank.clone(),
            surface_noise: plan.config.noise.surface.clone(),
            subsurface_noise: plan.config.noise.subsurface.clone(),
            seed: plan.seed,
            step_s: sc.step_s,
            focus: sc.focus,
            manual_counts: sc.manual_counts.enabled,
            manual_samples: sc.manual_counts.samples,
            manual_sample_ml: sc.manual_counts.sample_ml,
            ..SimFleetConfig::default()
        };
        let mut sim = SimFleet::new(cfg, coord.clone(), clock)?;
        let s = sim.run_until(plan.duration_s, plan.pace).await?;
        coord.finalize()?;
        eprintln!(
            "simulation finished: {} frames, {} rejected, t = {} s",
            s.frames, s.rejected, s.time
        );
        Some(s)
    } else {
        let unit_listener = TcpListener::bind(&fleet.unit_addr)
            .await
            .with_context(|| format!("binding unit address {}", fleet.unit_addr))?;
        eprintln!("units connect to {}", unit_listener.local_addr()?);
        let c = coord.clone();
        tokio::spawn(async move {
            if let Err(e) = serve_units(unit_listener, c).await {
                tracing::error!(error = %e, "unit listener stopped");
            }
        });
        None
    };

    if !(plan.sim && plan.exit_after_sim) {
        tokio::select! {
            _ = shutdown_signal() => {}
            r = api_task => {
                r.context("API task failed")?.context("API server stopped")?;
            }
        }
        coord.finalize()?;
    }
    coord.sync()?;
    output::write_json(
        &plan.out.join("serve-summary.json"),
        &ServeSummary {
            sim: summary,
            tanks: coord.tanks(),
        },
    )
}
