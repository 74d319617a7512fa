//! Fully resolved command plans and the manifests that record them.

use std::path::PathBuf;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::output;
use crate::{analyze, annotate, detect, eval, report, serve, simulate};

pub const TOOL: &str = "spawnwatch";

/// What a run actually did: every default filled in, every file inlined.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Plan {
    Simulate(simulate::SimulatePlan),
    Detect(detect::DetectPlan),
    Eval(eval::EvalPlan),
    Analyze(analyze::AnalyzePlan),
    Report(report::ReportPlan),
    Serve(Box<serve::ServePlan>),
    Annotate(annotate::AnnotatePlan),
}

impl Plan {
    pub fn name(&self) -> String {
        match self {
            Plan::Simulate(_) => "simulate".into(),
            Plan::Detect(_) => "detect".into(),
            Plan::Eval(_) => "eval".into(),
            Plan::Analyze(_) => "analyze".into(),
            Plan::Report(_) => "report".into(),
            Plan::Serve(_) => "serve".into(),
            Plan::Annotate(p) => format!("annotate-{}", p.action.name()),
        }
    }

    pub fn out(&self) -> &PathBuf {
        match self {
            Plan::Simulate(p) => &p.out,
            Plan::Detect(p) => &p.out,
            Plan::Eval(p) => &p.out,
            Plan::Analyze(p) => &p.out,
            Plan::Report(p) => &p.out,
            Plan::Serve(p) => &p.out,
            Plan::Annotate(p) => &p.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Plan::Simulate(p) => p.out = out,
            Plan::Detect(p) => p.out = out,
            Plan::Eval(p) => p.out = out,
            Plan::Analyze(p) => p.out = out,
            Plan::Report(p) => p.out = out,
            Plan::Serve(p) => p.out = out,
            Plan::Annotate(p) => p.out = out,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub plan: Plan,
}

pub fn execute(plan: Plan) -> Result<()> {
    std::fs::create_dir_all(plan.out())?;
    match &plan {
        Plan::Simulate(p) => simulate::run(p)?,
        Plan::Detect(p) => detect::run(p)?,
        Plan::Eval(p) => eval::run(p)?,
        Plan::Analyze(p) => analyze::run(p)?,
        Plan::Report(p) => report::run(p)?,
        Plan::Serve(p) => serve::run(p)?,
        Plan::Annotate(p) => annotate::run(p)?,
    }
    let manifest = Manifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        plan,
    };
    let name = format!("manifest-{}.json", manifest.plan.name());
    output::write_json(&manifest.plan.out().join(name), &manifest)
}
