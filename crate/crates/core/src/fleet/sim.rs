use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::analytics::{ManualCount, SeriesSnapshot};
use crate::detect::{Detector, DetectorNoise, OracleDetector};
use crate::error::{Error, Result};
use crate::model::OperationalMode;
use crate::simtank::{FocusBand, TankConfig, TankState};

use super::coordinator::LinkRequest;
use super::{CameraUnit, Coordinator, SimClock, Target, UnitState, Verb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimFleetConfig {
    /// Template for every tank; each tank gets its own seed.
    pub tank: TankConfig,
    pub surface_noise: DetectorNoise,
    pub subsurface_noise: DetectorNoise,
    pub seed: u64,
    /// Integration step of the tank simulators, seconds.
    pub step_s: f64,
    pub focus: FocusBand,
    /// Take simulated manual counts at stocking and at the start of the
    /// sub-surface phase.
    pub manual_counts: bool,
    pub manual_samples: usize,
    pub manual_sample_ml: f64,
    /// Issue the tank-level switch to sub-surface when the tank reaches it.
    pub auto_mode_switch: bool,
    pub debug_detections: bool,
}

impl Default for SimFleetConfig {
    fn default() -> Self {
        SimFleetConfig {
            tank: TankConfig::default(),
            surface_noise: DetectorNoise::identity(OperationalMode::Surface),
            subsurface_noise: DetectorNoise::identity(OperationalMode::SubSurface),
            seed: 0,
            step_s: 10.0,
            focus: FocusBand::default(),
            manual_counts: true,
            manual_samples: 6,
            manual_sample_ml: 5.0,
            auto_mode_switch: true,
            debug_detections: false,
        }
    }
}

struct SimTank {
    tank_id: String,
    state: TankState,
    units: Vec<CameraUnit>,
    stocking_counted: bool,
    switched: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub frames: u64,
    pub rejected: u64,
    pub time: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Simulated tanks and camera units feeding a coordinator in-process, on a
/// simulated clock. Units receive commands through the coordinator's
/// regular dispatch path.
pub struct SimFleet {
    config: SimFleetConfig,
    coord: Arc<Coordinator>,
    clock: Arc<SimClock>,
    tanks: Vec<SimTank>,
    commands: mpsc::Receiver<(usize, usize, LinkRequest)>,
    rng: ChaCha8Rng,
    summary: SimSummary,
}

impl SimFleet {
    /// Units use oracle detectors built from the configured noise models.
    pub fn new(config: SimFleetConfig, coord: Arc<Coordinator>, clock: Arc<SimClock>) -> Result<Self> {
        let (sn, un, seed) = (
            config.surface_noise.clone(),
            config.subsurface_noise.clone(),
            config.seed,
        );
        let mut k = 0u64;
        Self::with_detectors(config, coord, clock, move |_, mode| {
            k += 1;
            let noise = match mode {
                OperationalMode::Surface => sn.clone(),
                OperationalMode::SubSurface => un.clone(),
            };
            Ok(Arc::new(OracleDetector::new(noise, mix(seed, k, 1))?) as Arc<dyn Detector>)
        })
    }

    /// `make(unit_id, mode)` builds each unit's detector for each mode.
    /// Must be called inside a tokio runtime.
    pub fn with_detectors(
        config: SimFleetConfig,
        coord: Arc<Coordinator>,
        clock: Arc<SimClock>,
        mut make: impl FnMut(&str, OperationalMode) -> Result<Arc<dyn Detector>>,
    ) -> Result<Self> {
        if !(config.step_s > 0.0) {
            return Err(Error::InvalidConfig(vec!["step_s must be > 0".into()]));
        }
        let (tx, rx) = mpsc::channel(256);
        let mut tanks = Vec::new();
        for (ti, topo) in coord.topology().tanks.iter().enumerate() {
            let tank_cfg = TankConfig {
                seed: mix(config.seed, ti as u64, 2),
                ..config.tank.clone()
            };
            let state = TankState::new(tank_cfg)?;
            let mut units = Vec::new();
            for (ui, unit_id) in topo.unit_ids.iter().enumerate() {
                let mut us = UnitState::new(unit_id.as_str(), topo.tank_id.as_str());
                us.detector = "sim".into();
                let unit = CameraUnit::new(
                    us.clone(),
                    make(unit_id, OperationalMode::Surface)?,
                    make(unit_id, OperationalMode::SubSurface)?,
                    mix(config.seed, ti as u64, 100 + ui as u64),
                )
                .with_focus(config.focus)
                .with_debug_detections(config.debug_detections);
                let (link_tx, mut link_rx) = mpsc::channel::<LinkRequest>(8);
                let fwd = tx.clone();
                tokio::spawn(async move {
                    while let Some(req) = link_rx.recv().await {
                        if fwd.send((ti, ui, req)).await.is_err() {
                            break;
                        }
                    }
                });
                let hello = super::Hello {
                    protocol: super::PROTOCOL_VERSION.into(),
                    unit_id: unit_id.clone(),
                    tank_id: topo.tank_id.clone(),
                    state: Some(us),
                };
                coord.register(&hello, Some(link_tx))?;
                units.push(unit);
            }
            tanks.push(SimTank {
                tank_id: topo.tank_id.clone(),
                state,
                units,
                stocking_counted: false,
                switched: false,
            });
        }
        Ok(SimFleet {
            rng: ChaCha8Rng::seed_from_u64(mix(config.seed, 0, 3)),
            config,
            coord,
            clock,
            tanks,
            commands: rx,
            summary: SimSummary::default(),
        })
    }

    pub fn tank_state(&self, tank_id: &str) -> Option<&TankState> {
        self.tanks.iter().find(|t| t.tank_id == tank_id).map(|t| &t.state)
    }

    pub fn summary(&self) -> SimSummary {
        self.summary
    }

    fn apply_command(&mut self, ti: usize, ui: usize, req: LinkRequest) {
        let now = super::Clock::now(&*self.clock);
        let ack = self.tanks[ti].units[ui].handle(&req.command, now);
        let _ = req.reply.send(ack);
    }

    fn drain_commands(&mut self) {
        while let Ok((ti, ui, req)) = self.commands.try_recv() {
            self.apply_command(ti, ui, req);
        }
    }

    fn manual_count(&mut self, ti: usize) -> Result<ManualCount> {
        self.tanks[ti].state.sample_manual_count(
            self.config.manual_samples,
            self.config.manual_sample_ml,
            &mut self.rng,
        )
    }

    async fn switch_tank(&mut self, ti: usize) -> Result<()> {
        let coord = self.coord.clone();
        let tank_id = self.tanks[ti].tank_id.clone();
        let mut job = tokio::spawn(async move {
            coord
                .dispatch(
                    Target::Tank { tank_id },
                    Verb::SetMode {
                        mode: OperationalMode::SubSurface,
                    },
                )
                .await
        });
        loop {
            tokio::select! {
                r = &mut job => {
                    let acks = r.map_err(|e| Error::Protocol(format!("mode switch task failed: {e}")))??;
                    for a in acks.iter().filter(|a| a.status != super::AckStatus::Ok) {
                        tracing::warn!(unit = %a.unit_id, reason = ?a.reason, "unit did not switch mode");
                    }
                    return Ok(());
                }
                Some((t, u, req)) = self.commands.recv() => self.apply_command(t, u, req),
            }
        }
    }

    /// Runs every tank and unit until simulated time `until` (exclusive).
    /// With `pace = Some(x)` simulated time runs `x` times faster than wall
    /// time; otherwise as fast as possible.
    pub async fn run_until(&mut self, until: f64, pace: Option<f64>) -> Result<SimSummary> {
        let wall_start = Instant::now();
        let sim_start = super::Clock::now(&*self.clock);
        let mut iterations = 0u64;
        loop {
            let next = self
                .tanks
                .iter()
                .flat_map(|t| t.units.iter().filter_map(CameraUnit::next_due))
                .fold(f64::INFINITY, f64::min);
            if !(next < until) {
                break;
            }
            if let Some(speed) = pace {
                let target = wall_start + Duration::from_secs_f64(((next - sim_start) / speed).max(0.0));
                loop {
                    tokio::select! {
                        _ = tokio::time::sleep_until(target.into()) => break,
                        Some((t, u, req)) = self.commands.recv() => self.apply_command(t, u, req),
                    }
                }
            }
            self.drain_commands();
            self.clock.set(next.max(super::Clock::now(&*self.clock)));

            for ti in 0..self.tanks.len() {
                if !self.tanks[ti]
                    .units
                    .iter()
                    .any(|u| u.next_due().is_some_and(|d| d <= next))
                {
                    continue;
                }
                let step = self.config.step_s;
                self.tanks[ti].state.advance_to(next, step)?;
                if self.config.manual_counts && !self.tanks[ti].stocking_counted {
                    self.tanks[ti].stocking_counted = true;
                    let m = self.manual_count(ti)?;
                    self.coord.add_manual_count(&self.tanks[ti].tank_id.clone(), m)?;
                }
                if self.config.auto_mode_switch
                    && !self.tanks[ti].switched
                    && self.tanks[ti].state.mode() == OperationalMode::SubSurface
                {
                    self.tanks[ti].switched = true;
                    self.switch_tank(ti).await?;
                    if self.config.manual_counts {
                        let m = self.manual_count(ti)?;
                        self.coord.add_manual_count(&self.tanks[ti].tank_id.clone(), m)?;
                    }
                }
                let tank = &mut self.tanks[ti];
                for unit in &mut tank.units {
                    if unit.next_due().is_some_and(|d| d <= next) {
                        if let Some(msg) = unit.capture(&tank.state) {
                            match self.coord.ingest(msg) {
                                Ok(_) => self.summary.frames += 1,
                                Err(e) => {
                                    self.summary.rejected += 1;
                                    tracing::warn!(error = %e, "telemetry rejected");
                                }
                            }
                        }
                    }
                }
            }
            self.summary.time = next;
            iterations += 1;
            if iterations % 64 == 0 {
                tokio::task::yield_now().await;
            }
        }
        Ok(self.summary)
    }
}

/// Outcome of the monitoring-requirement checks on one tank's series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequirementReport {
    /// Time of the first defined fertilization estimate, relative to stocking.
    pub first_fertilization_after_s: Option<f64>,
    pub fertilization_within_two_hours: bool,
    /// Longest stretch of the sub-surface phase without a tank estimate.
    pub max_tank_count_gap_s: Option<f64>,
    /// `None` when the series never entered the sub-surface phase.
    pub hourly_tank_counts: Option<bool>,
}

impl RequirementReport {
    pub fn passed(&self) -> bool {
        self.fertilization_within_two_hours && self.hourly_tank_counts != Some(false)
    }
}

/// Checks that a fertilization estimate exists within two hours of
/// stocking and that the sub-surface phase, up to `end_time`, never goes an
/// hour without a tank-count estimate.
pub fn check_requirements(snapshot: &SeriesSnapshot, stocking_time: f64, end_time: f64) -> RequirementReport {
    let first_f = snapshot
        .fertilization
        .iter()
        .find(|r| r.f.is_some())
        .map(|r| r.time - stocking_time);
    let subsurface_start = snapshot.counts.first().map(|r| r.time);
    let (gap, hourly) = match subsurface_start {
        None => (None, None),
        Some(start) => {
            let mut last = start;
            let mut max_gap: f64 = 0.0;
            for r in snapshot.counts.iter().filter(|r| r.tank_estimate.is_some()) {
                max_gap = max_gap.max(r.time - last);
                last = r.time;
            }
            max_gap = max_gap.max(end_time - last);
            (Some(max_gap), Some(max_gap <= 3600.0))
        }
    };
    RequirementReport {
        first_fertilization_after_s: first_f,
        fertilization_within_two_hours: first_f.is_some_and(|t| t <= 2.0 * 3600.0),
        max_tank_count_gap_s: gap,
        hourly_tank_counts: hourly,
    }
}
