use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use spawnwatch_core::analytics::{harvest_plan, labor_report, HarvestPlan, LaborParams, LaborReport, SeriesSnapshot};

use crate::config::Config;
use crate::output;
use crate::plan::Plan;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Analyzed run directory (its series.json feeds the harvest plan).
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub tanks: Option<f64>,
    #[arg(long)]
    pub minutes_per_sample: Option<f64>,
    #[arg(long)]
    pub operator_hours: Option<f64>,
    /// Settlement substrate units to stock.
    #[arg(long, requires = "run")]
    pub substrate_units: Option<f64>,
    /// Target larvae per liter per substrate unit.
    #[arg(long, requires = "substrate_units")]
    pub target_density: Option<f64>,
    #[arg(long, requires = "substrate_units")]
    pub settlement_liters: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarvestInputs {
    pub substrate_units: f64,
    pub target_density_per_liter: f64,
    pub settlement_tank_liters: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportPlan {
    pub labor: LaborParams,
    pub run: Option<PathBuf>,
    pub harvest: Option<HarvestInputs>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarvestSection {
    pub tank_id: String,
    /// Latest rolling tank estimate the plan is based on.
    pub tank_estimate: f64,
    pub estimate_time: f64,
    pub inputs: HarvestInputs,
    pub plan: HarvestPlan,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub labor_inputs: LaborParams,
    pub labor: LaborReport,
    pub harvest: Option<HarvestSection>,
}

pub fn resolve(args: ReportArgs, config: &Config, out: Option<PathBuf>) -> Result<Plan> {
    let mut labor = config.labor;
    if let Some(v) = args.tanks {
        labor.n_tanks = v;
    }
    if let Some(v) = args.minutes_per_sample {
        labor.minutes_per_sample = v;
    }
    if let Some(v) = args.operator_hours {
        labor.operator_hours = v;
    }
    let harvest = match (args.substrate_units, args.target_density, args.settlement_liters) {
        (None, None, None) => None,
        (Some(s), Some(d), Some(l)) => Some(HarvestInputs {
            substrate_units: s,
            target_density_per_liter: d,
            settlement_tank_liters: l,
        }),
        _ => bail!("a harvest plan needs --substrate-units, --target-density and --settlement-liters"),
    };
    let Some(out) = out.or_else(|| args.run.clone()) else {
        bail!("report needs a run directory or --out");
    };
    Ok(Plan::Report(ReportPlan {
        labor,
        run: args.run,
        harvest,
        out,
    }))
}

fn harvest_section(run: &std::path::Path, inputs: HarvestInputs) -> Result<HarvestSection> {
    let path = run.join("series.json");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}; run analyze first", path.display()))?;
    let snapshot: SeriesSnapshot =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let Some((time, estimate)) = snapshot
        .counts
        .iter()
        .rev()
        .find_map(|r| r.rolling_mean.or(r.tank_estimate).map(|v| (r.time, v)))
    else {
        bail!("{} has no calibrated tank estimate", path.display());
    };
    let plan = harvest_plan(
        estimate,
        inputs.substrate_units,
        inputs.target_density_per_liter,
        inputs.settlement_tank_liters,
    )?;
    Ok(HarvestSection {
        tank_id: snapshot.tank_id,
        tank_estimate: estimate,
        estimate_time: time,
        inputs,
        plan,
    })
}

fn to_text(r: &Report) -> String {
    let mut s = String::new();
    let p = &r.labor_inputs;
    let _ = writeln!(s, "# labor");
    let _ = writeln!(s, "tanks                 {}", p.n_tanks);
    let _ = writeln!(s, "samples per tank      {}", r.labor.samples_per_tank);
    let _ = writeln!(s, "minutes per sample    {}", p.minutes_per_sample);
    let _ = writeln!(s, "manual hours          {}", r.labor.manual_hours);
    let _ = writeln!(s, "operator hours        {}", p.operator_hours);
    let _ = writeln!(s, "hours saved           {}", r.labor.hours_saved);
    if let Some(h) = &r.harvest {
        let _ = writeln!(s, "# harvest ({})", h.tank_id);
        let _ = writeln!(
            s,
            "tank estimate         {:.0} (t = {:.0} s)",
            h.tank_estimate, h.estimate_time
        );
        let _ = writeln!(s, "required larvae       {:.0}", h.plan.required_larvae);
        let _ = writeln!(s, "proportion to harvest {:.4}", h.plan.proportion);
        if h.plan.shortfall {
            let _ = writeln!(s, "shortfall: the tank holds fewer larvae than required");
        }
    }
    s
}

pub fn run(plan: &ReportPlan) -> Result<()> {
    let harvest = match (&plan.run, plan.harvest) {
        (Some(run), Some(inputs)) => {
            output::require_dir(run)?;
            Some(harvest_section(run, inputs)?)
        }
        _ => None,
    };
    let report = Report {
        labor_inputs: plan.labor,
        labor: labor_report(&plan.labor)?,
        harvest,
    };
    output::write_json(&plan.out.join("report.json"), &report)?;
    output::write_bytes(&plan.out.join("report.txt"), to_text(&report).as_bytes())
}
