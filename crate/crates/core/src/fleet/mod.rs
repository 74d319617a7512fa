//! Camera units, the coordinator that aggregates their telemetry, the
//! newline-delimited wire protocol between them, and the HTTP API.

mod api;
mod coordinator;
mod ordering;
mod sim;
mod unit;
mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{counts_from_labels, Detection, OperationalMode, StageCounts};

pub use api::{router, ApiConfig, ApiState, API_SCHEMA_VERSION};
pub use coordinator::{
    replay_tank, Coordinator, CoordinatorConfig, Event, IngestOutcome, Link, LinkRequest, TankSummary, UnitStatus,
};
pub use ordering::{Admission, OrderingPoint, OrderingStats};
pub use sim::{check_requirements, RequirementReport, SimFleet, SimFleetConfig, SimSummary};
pub use unit::CameraUnit;
pub use wire::{
    read_frame, serve_units, write_frame, ErrorFrame, Frame, Hello, UnitClient, Welcome, WireMessage, MAX_LINE_BYTES,
    PROTOCOL_VERSION,
};

/// Default capture interval in seconds.
pub const DEFAULT_CAPTURE_INTERVAL_S: f64 = 10.0;

/// Upper bound on detections attached to one telemetry message.
pub const MAX_TELEMETRY_DETECTIONS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerState {
    On,
    Off,
    Rebooting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitState {
    pub unit_id: String,
    pub tank_id: String,
    pub mode: OperationalMode,
    pub capture_interval_s: f64,
    pub power: PowerState,
    pub last_frame_time: Option<f64>,
    /// Human-readable detector binding, e.g. `oracle` or `reference`.
    pub detector: String,
}

impl UnitState {
    pub fn new(unit_id: impl Into<String>, tank_id: impl Into<String>) -> Self {
        UnitState {
            unit_id: unit_id.into(),
            tank_id: tank_id.into(),
            mode: OperationalMode::Surface,
            capture_interval_s: DEFAULT_CAPTURE_INTERVAL_S,
            power: PowerState::On,
            last_frame_time: None,
            detector: String::new(),
        }
    }
}

/// One processed frame as reported by a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub unit_id: String,
    pub frame_id: u64,
    pub timestamp: f64,
    pub mode: OperationalMode,
    /// Stage counts; present for surface frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<StageCounts>,
    /// In-focus count; present for sub-surface frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_focus_count: Option<u64>,
    /// Full detections, only when the unit runs with debug output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
    pub inference_time: f64,
    /// Set when capture or detection failed; no counts are carried then.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TelemetryMessage {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| {
            Err(Error::Protocol(format!(
                "telemetry {}#{}: {why}",
                self.unit_id, self.frame_id
            )))
        };
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return bad("timestamp must be finite and >= 0".into());
        }
        if self.error.is_some() {
            if self.counts.is_some() || self.in_focus_count.is_some() {
                return bad("failed frames carry no counts".into());
            }
            return Ok(());
        }
        match (self.mode, &self.counts, self.in_focus_count) {
            (OperationalMode::Surface, Some(_), None) | (OperationalMode::SubSurface, None, Some(_)) => {}
            _ => return bad(format!("{} telemetry has the wrong count fields", self.mode.as_str())),
        }
        if let Some(dets) = &self.detections {
            if dets.len() > MAX_TELEMETRY_DETECTIONS {
                return bad(format!("more than {MAX_TELEMETRY_DETECTIONS} detections"));
            }
            match self.mode {
                OperationalMode::Surface => {
                    let c = counts_from_labels(dets.iter().map(|d| d.label))?;
                    if Some(c) != self.counts {
                        return bad("counts disagree with attached detections".into());
                    }
                }
                OperationalMode::SubSurface => {
                    if Some(dets.len() as u64) != self.in_focus_count {
                        return bad("in-focus count disagrees with attached detections".into());
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Unit { unit_id: String },
    Tank { tank_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "snake_case")]
pub enum Verb {
    SetMode {
        mode: OperationalMode,
    },
    SetInterval {
        seconds: f64,
    },
    PowerCycle {
        #[serde(default = "default_downtime")]
        downtime_s: f64,
    },
    Ping,
}

fn default_downtime() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandMessage {
    pub command_id: u64,
    pub target: Target,
    #[serde(flatten)]
    pub verb: Verb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Ok,
    Rejected,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub command_id: u64,
    pub unit_id: String,
    pub status: AckStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Unit state after handling the command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<UnitState>,
}

impl Ack {
    pub fn timeout(command_id: u64, unit_id: &str, reason: impl Into<String>) -> Self {
        Ack {
            command_id,
            unit_id: unit_id.to_string(),
            status: AckStatus::Timeout,
            reason: Some(reason.into()),
            state: None,
        }
    }
}

/// Source of "now" in seconds since the start of the run.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

/// Clock advanced explicitly by a simulation driver.
#[derive(Debug, Default)]
pub struct SimClock {
    bits: AtomicU64,
}

impl SimClock {
    pub fn new(start: f64) -> Self {
        SimClock {
            bits: AtomicU64::new(start.to_bits()),
        }
    }

    pub fn set(&self, t: f64) {
        self.bits.store(t.to_bits(), Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }
}

/// Wall-clock seconds since construction.
#[derive(Debug)]
pub struct WallClock {
    start: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock { start: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankTopology {
    pub tank_id: String,
    pub unit_ids: Vec<String>,
}

/// Which units belong to which tank.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FleetTopology {
    pub tanks: Vec<TankTopology>,
}

impl FleetTopology {
    /// `n_tanks` tanks named `tank-01`.. with units `tank-01-a`, `tank-01-b`, ...
    pub fn uniform(n_tanks: usize, units_per_tank: usize) -> Self {
        let tanks = (1..=n_tanks)
            .map(|i| {
                let tank_id = format!("tank-{i:02}");
                let unit_ids = (0..units_per_tank)
                    .map(|u| format!("{tank_id}-{}", unit_suffix(u)))
                    .collect();
                TankTopology { tank_id, unit_ids }
            })
            .collect();
        FleetTopology { tanks }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tanks {
            crate::store::validate_id(&t.tank_id)?;
            if t.unit_ids.is_empty() {
                return Err(Error::InvalidConfig(vec![format!("tank {} has no units", t.tank_id)]));
            }
            for u in &t.unit_ids {
                crate::store::validate_id(u)?;
                if !seen.insert(u.clone()) {
                    return Err(Error::InvalidConfig(vec![format!("unit {u} listed twice")]));
                }
            }
        }
        let mut tanks: Vec<&str> = self.tanks.iter().map(|t| t.tank_id.as_str()).collect();
        tanks.sort_unstable();
        if tanks.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(vec!["duplicate tank id".into()]));
        }
        Ok(())
    }

    pub fn unit_count(&self) -> usize {
        self.tanks.iter().map(|t| t.unit_ids.len()).sum()
    }
}

fn unit_suffix(mut i: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'a' + (i % 26) as u8);
        i /= 26;
        if i == 0 {
            break;
        }
        i -= 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}
