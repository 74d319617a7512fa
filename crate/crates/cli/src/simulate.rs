use std::path::PathBuf;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spawnwatch_core::detect::Source;
use spawnwatch_core::fleet::FleetTopology;
use spawnwatch_core::raster::{render_frame, RenderConfig};
use spawnwatch_core::simtank::{TankConfig, TankState};
use spawnwatch_core::store::{RecordEnvelope, RecordType};

use crate::config::Scenario;
use crate::output::{self, mix};

pub const TRUTH_LOG: &str = "truth.jsonl";
pub const MANUAL_LOG: &str = "manual_counts.jsonl";
pub const RENDER_DIR: &str = "renders";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatePlan {
    pub scenario: Scenario,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn render_path(run: &std::path::Path, unit_id: &str, frame_id: u64) -> PathBuf {
    run.join(RENDER_DIR).join(format!("{unit_id}-{frame_id:06}.pgm"))
}

pub fn run(plan: &SimulatePlan) -> Result<()> {
    let sc = &plan.scenario;
    sc.validate()?;
    let topo = FleetTopology::uniform(1, sc.units);
    let tank_id = topo.tanks[0].tank_id.clone();
    let unit_ids = topo.tanks[0].unit_ids.clone();

    let mut state = TankState::new(TankConfig {
        seed: plan.seed,
        ..sc.tank.clone()
    })?;
    let mut unit_rngs: Vec<ChaCha8Rng> = (0..sc.units)
        .map(|u| ChaCha8Rng::seed_from_u64(mix(plan.seed, 100 + u as u64)))
        .collect();
    let mut manual_rng = ChaCha8Rng::seed_from_u64(mix(plan.seed, 1));
    let mut manual_times = if sc.manual_counts.times.is_empty() {
        vec![0.0, state.timeline().t1]
    } else {
        sc.manual_counts.times.clone()
    };
    manual_times.sort_by(f64::total_cmp);
    let mut manual_times = manual_times.into_iter().peekable();

    let render_dir = plan.out.join(RENDER_DIR);
    if render_dir.exists() {
        std::fs::remove_dir_all(&render_dir).with_context(|| format!("clearing {}", render_dir.display()))?;
    }
    let render = sc.render.map(|r| RenderConfig {
        seed: mix(plan.seed, 2),
        ..r
    });

    let mut truth = Vec::new();
    let mut manual = Vec::new();
    let mut tick = 0u64;
    loop {
        let t = tick as f64 * sc.capture_interval_s;
        if !(t < sc.duration_s) {
            break;
        }
        state.advance_to(t, sc.step_s)?;
        while sc.manual_counts.enabled && manual_times.peek().is_some_and(|m| *m <= t) {
            manual_times.next();
            let m = state.sample_manual_count(sc.manual_counts.samples, sc.manual_counts.sample_ml, &mut manual_rng)?;
            manual.push(
                RecordEnvelope::from_payload(RecordType::ManualCount, m.time, &m)?
                    .with_tank(tank_id.as_str())
                    .with_source("simulated")
                    .with_seq(manual.len() as u64),
            );
        }
        for (unit_id, rng) in unit_ids.iter().zip(&mut unit_rngs) {
            let frame = state.capture_frame(tick, sc.focus, rng);
            if let Some(cfg) = &render {
                let img = render_frame(&frame, cfg)?.image;
                let mut bytes = Vec::new();
                img.write_pgm(&mut bytes)?;
                output::write_bytes(&render_path(&plan.out, unit_id, tick), &bytes)?;
            }
            truth.push(
                RecordEnvelope::from_payload(RecordType::Truth, t, &frame)?
                    .with_tank(tank_id.as_str())
                    .with_unit(unit_id.as_str())
                    .with_source(Source::Truth.as_str())
                    .with_seq(truth.len() as u64),
            );
        }
        tick += 1;
    }
    output::write_jsonl(&plan.out.join(TRUTH_LOG), &truth)?;
    output::write_jsonl(&plan.out.join(MANUAL_LOG), &manual)?;
    tracing::info!(frames = truth.len(), manual = manual.len(), "simulation written");
    Ok(())
}
