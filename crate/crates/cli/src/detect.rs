use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spawnwatch_core::detect::{
    Detector, DetectorNoise, FrameInput, OracleDetector, ReferenceDetector, ReferenceParams,
};
use spawnwatch_core::raster::GrayImage;
use spawnwatch_core::simtank::FrameTruth;
use spawnwatch_core::store::{RecordEnvelope, RecordType};
use spawnwatch_core::{Detection, OperationalMode};

use crate::config::NoiseConfig;
use crate::output::{self, mix};
use crate::simulate::{render_path, TRUTH_LOG};

pub const DETECTION_LOG: &str = "detections.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Ground truth passed through unchanged.
    Oracle,
    /// Oracle with the configured noise models.
    Noisy,
    Reference,
}

/// `kind[:mode]`, e.g. `reference:surface`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    pub bound: Option<OperationalMode>,
}

impl FromStr for DetectorSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, mode) = match s.split_once(':') {
            Some((k, m)) => (k, Some(m)),
            None => (s, None),
        };
        let kind = match kind {
            "oracle" => DetectorKind::Oracle,
            "noisy" => DetectorKind::Noisy,
            "reference" => DetectorKind::Reference,
            other => bail!("unknown detector {other:?} (expected oracle, noisy or reference)"),
        };
        let bound = match mode {
            None => None,
            Some(m) => Some(OperationalMode::parse(m).with_context(|| format!("unknown mode {m:?} in detector spec"))?),
        };
        Ok(DetectorSpec { kind, bound })
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            DetectorKind::Oracle => "oracle",
            DetectorKind::Noisy => "noisy",
            DetectorKind::Reference => "reference",
        };
        match self.bound {
            Some(m) => write!(f, "{kind}:{m}"),
            None => f.write_str(kind),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectPlan {
    pub run: PathBuf,
    pub detector: DetectorSpec,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub reference: ReferenceParams,
    pub out: PathBuf,
}

/// Payload of a detection record. Inference time is left out so that the
/// log is a pure function of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: u64,
    pub mode: OperationalMode,
    pub detections: Vec<Detection>,
}

struct UnitDetectors {
    surface: Arc<dyn Detector>,
    subsurface: Arc<dyn Detector>,
}

fn build(plan: &DetectPlan, unit_index: u64) -> Result<UnitDetectors> {
    let seed = mix(plan.seed, 200 + unit_index);
    let oracle =
        |noise: DetectorNoise| -> Result<Arc<dyn Detector>> { Ok(Arc::new(OracleDetector::new(noise, seed)?)) };
    let (surface, subsurface): (Arc<dyn Detector>, Arc<dyn Detector>) = match plan.detector.kind {
        DetectorKind::Oracle => (
            oracle(DetectorNoise::identity(OperationalMode::Surface))?,
            oracle(DetectorNoise::identity(OperationalMode::SubSurface))?,
        ),
        DetectorKind::Noisy => (
            oracle(plan.noise.surface.clone())?,
            oracle(plan.noise.subsurface.clone())?,
        ),
        DetectorKind::Reference => (
            Arc::new(ReferenceDetector::new(plan.reference).bound_to(OperationalMode::Surface)),
            Arc::new(ReferenceDetector::new(plan.reference).bound_to(OperationalMode::SubSurface)),
        ),
    };
    // A bound spec runs one model on every frame, whatever its mode.
    Ok(match plan.detector.bound {
        None => UnitDetectors { surface, subsurface },
        Some(OperationalMode::Surface) => UnitDetectors {
            subsurface: surface.clone(),
            surface,
        },
        Some(OperationalMode::SubSurface) => UnitDetectors {
            surface: subsurface.clone(),
            subsurface,
        },
    })
}

fn load_render(path: &std::path::Path) -> Result<Option<GrayImage>> {
    if !path.is_file() {
        return Ok(None);
    }
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let img =
        GrayImage::read_pgm(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(img))
}

pub fn run(plan: &DetectPlan) -> Result<()> {
    output::require_dir(&plan.run)?;
    let truth = output::read_jsonl(&plan.run.join(TRUTH_LOG))?;
    let mut detectors: BTreeMap<String, UnitDetectors> = BTreeMap::new();
    let mut records = Vec::with_capacity(truth.len());
    let mut busy = 0.0;
    let started = Instant::now();
    for env in &truth {
        let frame: FrameTruth = env.payload_as()?;
        let unit_id = env.unit_id.clone().unwrap_or_default();
        if !detectors.contains_key(&unit_id) {
            let d = build(plan, detectors.len() as u64)?;
            detectors.insert(unit_id.clone(), d);
        }
        let d = &detectors[&unit_id];
        let det = match frame.mode {
            OperationalMode::Surface => &d.surface,
            OperationalMode::SubSurface => &d.subsurface,
        };
        let image = load_render(&render_path(&plan.run, &unit_id, frame.frame_id))?;
        let result = det
            .detect(FrameInput {
                truth: &frame,
                image: image.as_ref(),
            })
            .with_context(|| format!("{} on unit {unit_id} frame {}", plan.detector, frame.frame_id))?;
        busy += result.inference_time;
        let payload = DetectionRecord {
            frame_id: frame.frame_id,
            mode: frame.mode,
            detections: result.detections,
        };
        let mut rec = RecordEnvelope::from_payload(RecordType::Detection, env.timestamp, &payload)?
            .with_unit(unit_id.as_str())
            .with_source(det.source().as_str())
            .with_seq(records.len() as u64);
        rec.tank_id = env.tank_id.clone();
        records.push(rec);
    }
    output::write_jsonl(&plan.out.join(DETECTION_LOG), &records)?;
    let n = records.len().max(1) as f64;
    tracing::info!(
        frames = records.len(),
        mean_inference_s = busy / n,
        wall_s = started.elapsed().as_secs_f64(),
        "detection finished"
    );
    Ok(())
}
