use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use spawnwatch_core::analytics::{
    fertilization_success, rmse, Alert, Calibration, CultureHealth, ManualCount, SeriesConfig,
};
use spawnwatch_core::fleet::{check_requirements, OrderingPoint, OrderingStats, RequirementReport, TelemetryMessage};
use spawnwatch_core::model::counts_from_labels;
use spawnwatch_core::simtank::FrameTruth;
use spawnwatch_core::store::RecordType;
use spawnwatch_core::OperationalMode;

use crate::detect::{DetectionRecord, DETECTION_LOG};
use crate::output;
use crate::simulate::{MANUAL_LOG, TRUTH_LOG};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzePlan {
    pub run: PathBuf,
    pub manual: Option<PathBuf>,
    pub tolerance_s: f64,
    pub series: SeriesConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RmseSummary {
    /// Rolling fertilization success against the simulated tank census.
    pub fertilization_vs_truth: Option<f64>,
    /// Rolling tank estimate against the simulated live population.
    pub tank_count_vs_truth: Option<f64>,
    /// The same as a fraction of the mean true population.
    pub tank_count_vs_truth_relative: Option<f64>,
    pub tank_count_vs_manual: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Analysis {
    pub tank_id: String,
    pub frames: usize,
    pub health: CultureHealth,
    pub calibration: Option<Calibration>,
    pub alerts: Vec<Alert>,
    pub ordering: OrderingStats,
    pub rmse: RmseSummary,
    pub requirements: RequirementReport,
}

fn telemetry(unit_id: String, timestamp: f64, d: DetectionRecord) -> Result<TelemetryMessage> {
    let (counts, in_focus_count) = match d.mode {
        OperationalMode::Surface => (Some(counts_from_labels(d.detections.iter().map(|x| x.label))?), None),
        OperationalMode::SubSurface => (None, Some(d.detections.len() as u64)),
    };
    Ok(TelemetryMessage {
        unit_id,
        frame_id: d.frame_id,
        timestamp,
        mode: d.mode,
        counts,
        in_focus_count,
        detections: None,
        inference_time: 0.0,
        error: None,
    })
}

pub fn run(plan: &AnalyzePlan) -> Result<()> {
    output::require_dir(&plan.run)?;
    if !(plan.tolerance_s >= 0.0) {
        bail!("tolerance_s must be >= 0");
    }
    let detections = output::read_jsonl(&plan.run.join(DETECTION_LOG))?;
    let tank_id = detections
        .iter()
        .find_map(|e| e.tank_id.clone())
        .unwrap_or_else(|| "tank-01".to_string());

    let manual_path = plan.manual.clone().unwrap_or_else(|| plan.run.join(MANUAL_LOG));
    let mut manual: Vec<ManualCount> = Vec::new();
    if manual_path.is_file() {
        for env in output::read_jsonl(&manual_path)? {
            if env.record_type == RecordType::ManualCount {
                manual.push(env.payload_as()?);
            }
        }
    } else if plan.manual.is_some() {
        bail!("manual-count log {} does not exist", manual_path.display());
    }
    manual.sort_by(|a, b| a.time.total_cmp(&b.time));

    // An unbounded reordering window: the whole run is buffered and applied
    // in timestamp order at flush.
    let mut op = OrderingPoint::new(&tank_id, f64::INFINITY, plan.series, false);
    for m in &manual {
        op.manual_count(m.clone());
    }
    let mut msgs = Vec::with_capacity(detections.len());
    for env in detections {
        let unit = env.unit_id.clone().unwrap_or_default();
        msgs.push(telemetry(unit, env.timestamp, env.payload_as()?)?);
    }
    msgs.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.unit_id.cmp(&b.unit_id))
            .then_with(|| a.frame_id.cmp(&b.frame_id))
    });
    for m in &msgs {
        op.offer(m);
    }
    op.flush_all();
    let series = op.series();
    let snapshot = series.snapshot();

    let mut f_truth = BTreeMap::new();
    let mut pop_truth = BTreeMap::new();
    let truth_path = plan.run.join(TRUTH_LOG);
    if truth_path.is_file() {
        for env in output::read_jsonl(&truth_path)? {
            let t: FrameTruth = env.payload_as()?;
            let key = (t.time * 1000.0).round() as i64;
            if let Some(f) = fertilization_success(&t.tank_counts) {
                if t.mode == OperationalMode::Surface {
                    f_truth.insert(key, (t.time, f));
                }
            }
            if t.mode == OperationalMode::SubSurface {
                pop_truth.insert(key, (t.time, t.tank_population as f64));
            }
        }
    }
    let f_ref: Vec<(f64, f64)> = f_truth.into_values().collect();
    let pop_ref: Vec<(f64, f64)> = pop_truth.into_values().collect();
    let manual_ref: Vec<(f64, f64)> = manual.iter().map(|m| (m.time, m.tank_total as f64)).collect();
    let tol = plan.tolerance_s;
    let rolling_est = snapshot.rolling_estimates();
    let tank_rmse = rmse(&rolling_est, &pop_ref, tol).ok();
    let mean_pop = (!pop_ref.is_empty()).then(|| pop_ref.iter().map(|r| r.1).sum::<f64>() / pop_ref.len() as f64);
    let rmse_summary = RmseSummary {
        fertilization_vs_truth: rmse(&snapshot.rolling_fertilization(), &f_ref, tol).ok(),
        tank_count_vs_truth: tank_rmse,
        tank_count_vs_truth_relative: tank_rmse.zip(mean_pop).map(|(e, p)| e / p),
        tank_count_vs_manual: rmse(&rolling_est, &manual_ref, tol).ok(),
    };

    let start = msgs.first().map_or(0.0, |m| m.timestamp);
    let end = msgs.last().map_or(0.0, |m| m.timestamp);
    let analysis = Analysis {
        tank_id: tank_id.clone(),
        frames: msgs.len(),
        health: snapshot.health,
        calibration: snapshot.calibration,
        alerts: series.alerts.clone(),
        ordering: op.stats(),
        rmse: rmse_summary,
        requirements: check_requirements(&snapshot, start, end),
    };

    output::write_json(&plan.out.join("series.json"), &snapshot)?;
    output::write_bytes(
        &plan.out.join("fertilization.tsv"),
        snapshot.fertilization_table().as_bytes(),
    )?;
    output::write_bytes(&plan.out.join("tank_counts.tsv"), snapshot.count_table().as_bytes())?;
    output::write_bytes(&plan.out.join("manual_counts.tsv"), snapshot.manual_table().as_bytes())?;
    output::write_json(&plan.out.join("analysis.json"), &analysis)?;
    Ok(())
}
