use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use spawnwatch_core::evalkit::{evaluate, f1, ClassMetrics, EvalFrame, EvalReport, MatchConfig};
use spawnwatch_core::simtank::FrameTruth;
use spawnwatch_core::{OperationalMode, StageLabel};

use crate::detect::{DetectionRecord, DETECTION_LOG};
use crate::output;
use crate::simulate::TRUTH_LOG;

/// Reported per-class precision, recall and AP@0.5 (percent) of the
/// deployed surface model.
const PUBLISHED_SURFACE: [(StageLabel, f64, f64, f64); 6] = [
    (StageLabel::Egg, 91.1, 89.9, 90.7),
    (StageLabel::FirstCleavage, 86.5, 76.0, 83.5),
    (StageLabel::TwoCell, 82.5, 84.8, 87.1),
    (StageLabel::FourToEightCell, 75.6, 70.2, 74.1),
    (StageLabel::Advanced, 80.2, 88.3, 87.5),
    (StageLabel::Damaged, 66.2, 37.8, 52.1),
];

/// The same for the sub-surface model.
const PUBLISHED_SUBSURFACE: (f64, f64, f64) = (64.9, 65.7, 64.0);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPlan {
    pub run: Option<PathBuf>,
    pub published: bool,
    pub matching: MatchConfig,
    pub out: PathBuf,
}

pub fn published_reports() -> Vec<EvalReport> {
    let surface = PUBLISHED_SURFACE
        .iter()
        .map(|&(label, p, r, ap)| ClassMetrics::from_rates(label, p / 100.0, r / 100.0, ap / 100.0))
        .collect();
    let (p, r, ap) = PUBLISHED_SUBSURFACE;
    let sub = ClassMetrics::from_rates(StageLabel::CoralInFocus, p / 100.0, r / 100.0, ap / 100.0);
    debug_assert!((sub.f1 - f1(p / 100.0, r / 100.0)).abs() < 1e-15);
    vec![
        EvalReport::from_class_metrics(OperationalMode::Surface, 0, surface),
        EvalReport::from_class_metrics(OperationalMode::SubSurface, 0, vec![sub]),
    ]
}

fn run_frames(run: &std::path::Path) -> Result<BTreeMap<OperationalMode, Vec<EvalFrame>>> {
    output::require_dir(run)?;
    let mut truths = BTreeMap::new();
    for env in output::read_jsonl(&run.join(TRUTH_LOG))? {
        let t: FrameTruth = env.payload_as()?;
        truths.insert((env.unit_id.unwrap_or_default(), t.frame_id), t);
    }
    let mut frames: BTreeMap<OperationalMode, Vec<EvalFrame>> = BTreeMap::new();
    for env in output::read_jsonl(&run.join(DETECTION_LOG))? {
        let d: DetectionRecord = env.payload_as()?;
        let unit = env.unit_id.unwrap_or_default();
        let Some(t) = truths.remove(&(unit.clone(), d.frame_id)) else {
            bail!("detections for unit {unit} frame {} have no truth record", d.frame_id);
        };
        let list = frames.entry(t.mode).or_default();
        list.push(EvalFrame {
            frame_id: list.len() as u64,
            detections: d.detections,
            truths: t.boxes,
        });
    }
    if let Some(((unit, frame), _)) = truths.into_iter().next() {
        bail!("unit {unit} frame {frame} has truth but no detections; run detect first");
    }
    Ok(frames)
}

fn write_report(plan: &EvalPlan, stem: &str, report: &EvalReport) -> Result<()> {
    output::write_json(&plan.out.join(format!("{stem}.json")), report)?;
    output::write_bytes(&plan.out.join(format!("{stem}.txt")), report.to_text().as_bytes())
}

pub fn run(plan: &EvalPlan) -> Result<()> {
    plan.matching.validate()?;
    if plan.published {
        let reports = published_reports();
        for r in &reports {
            write_report(plan, &format!("eval-published-{}", r.mode), r)?;
        }
        output::write_json(&plan.out.join("eval-published.json"), &reports)?;
    }
    if let Some(run) = &plan.run {
        let mut reports = Vec::new();
        for (mode, frames) in run_frames(run)? {
            if frames.iter().all(|f| f.truths.is_empty() && f.detections.is_empty()) {
                tracing::warn!(%mode, "no boxes in any frame; skipping");
                continue;
            }
            let mut report = evaluate(&frames, &plan.matching)?;
            report.mode = mode;
            write_report(plan, &format!("eval-{mode}"), &report)?;
            reports.push(report);
        }
        output::write_json(&plan.out.join("eval.json"), &reports)?;
    }
    Ok(())
}
