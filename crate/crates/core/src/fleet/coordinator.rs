use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};

use crate::analytics::{Alert, Calibration, CultureHealth, ManualCount, SeriesConfig, SeriesSnapshot};
use crate::error::{Error, Result};
use crate::model::OperationalMode;
use crate::store::{RecordEnvelope, RecordType, RunStore, ScanFilter};

use super::ordering::{Admission, OrderingPoint, OrderingStats};
use super::{Ack, AckStatus, Clock, CommandMessage, FleetTopology, Hello, Target, TelemetryMessage, UnitState, Verb};

/// Command delivery request handed to whatever carries commands to a unit.
#[derive(Debug)]
pub struct LinkRequest {
    pub command: CommandMessage,
    pub reply: oneshot::Sender<Ack>,
}

pub type Link = mpsc::Sender<LinkRequest>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinatorConfig {
    pub reorder_window_s: f64,
    pub series: SeriesConfig,
    /// Per-unit command acknowledgement timeout.
    #[serde(with = "secs")]
    pub command_timeout: Duration,
    /// Keep a series per unit next to the pooled tank series.
    pub per_unit_series: bool,
    /// Rewrite a tank's snapshot file after this many applied points (0 = only at finalize).
    pub snapshot_every: u64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            reorder_window_s: 60.0,
            series: SeriesConfig::default(),
            command_timeout: Duration::from_secs(5),
            per_unit_series: true,
            snapshot_every: 0,
        }
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// Something observers of the coordinator may want to react to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Telemetry {
        tank_id: String,
        unit_id: String,
        frame_id: u64,
        timestamp: f64,
    },
    SeriesUpdated {
        tank_id: String,
        points: usize,
    },
    Alert {
        alert: Alert,
    },
    AlertAcknowledged {
        tank_id: String,
        alert_id: u64,
    },
    ManualCount {
        tank_id: String,
        manual: ManualCount,
        calibration: Option<Calibration>,
    },
    Command {
        acks: Vec<Ack>,
    },
    UnitConnected {
        unit_id: String,
    },
    UnitDisconnected {
        unit_id: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub admission: Admission,
    /// Byte offset of the stored record; `None` for dropped duplicates.
    pub position: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankSummary {
    pub tank_id: String,
    pub mode: OperationalMode,
    pub health: CultureHealth,
    pub latest_fertilization: Option<f64>,
    pub latest_tank_estimate: Option<f64>,
    pub calibration: Option<Calibration>,
    pub units: Vec<String>,
    pub open_alerts: usize,
    pub stats: OrderingStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitStatus {
    pub unit_id: String,
    pub tank_id: String,
    pub connected: bool,
    pub state: Option<UnitState>,
    pub last_frame_id: Option<u64>,
    pub last_timestamp: Option<f64>,
    pub stored_records: u64,
}

struct TankIngest {
    tank_id: String,
    store: RunStore,
    next_seq: u64,
    ordering: OrderingPoint,
    mode: OperationalMode,
    /// Lowest sub-surface frame id per unit, for mode-regression checks.
    first_subsurface_frame: BTreeMap<String, u64>,
    cached: Option<Arc<SeriesSnapshot>>,
    applied_since_snapshot: u64,
}

struct UnitRuntime {
    state: Option<UnitState>,
    link: Option<Link>,
    last_frame_id: Option<u64>,
    last_timestamp: Option<f64>,
    stored_records: u64,
}

/// Aggregates telemetry from every unit, persists it, and maintains one
/// ordered series per tank. Each tank has its own lock; tanks never share
/// mutable state.
pub struct Coordinator {
    config: CoordinatorConfig,
    clock: Arc<dyn Clock>,
    root: PathBuf,
    topology: FleetTopology,
    tanks: BTreeMap<String, Mutex<TankIngest>>,
    units: BTreeMap<String, (String, Mutex<UnitRuntime>)>,
    events: broadcast::Sender<Event>,
    next_command: AtomicU64,
    eval_report: RwLock<Option<serde_json::Value>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl Coordinator {
    pub fn new(
        topology: FleetTopology,
        config: CoordinatorConfig,
        root: impl AsRef<Path>,
        clock: Arc<dyn Clock>,
    ) -> Result<Arc<Self>> {
        topology.validate()?;
        if !(config.reorder_window_s >= 0.0) {
            return Err(Error::InvalidConfig(vec!["reorder_window_s must be >= 0".into()]));
        }
        let root = root.as_ref().to_path_buf();
        let mut tanks = BTreeMap::new();
        let mut units = BTreeMap::new();
        for t in &topology.tanks {
            tanks.insert(
                t.tank_id.clone(),
                Mutex::new(TankIngest {
                    tank_id: t.tank_id.clone(),
                    store: RunStore::open(&root)?,
                    next_seq: 0,
                    ordering: OrderingPoint::new(
                        &t.tank_id,
                        config.reorder_window_s,
                        config.series,
                        config.per_unit_series,
                    ),
                    mode: OperationalMode::Surface,
                    first_subsurface_frame: BTreeMap::new(),
                    cached: None,
                    applied_since_snapshot: 0,
                }),
            );
            for u in &t.unit_ids {
                units.insert(
                    u.clone(),
                    (
                        t.tank_id.clone(),
                        Mutex::new(UnitRuntime {
                            state: None,
                            link: None,
                            last_frame_id: None,
                            last_timestamp: None,
                            stored_records: 0,
                        }),
                    ),
                );
            }
        }
        let (events, _) = broadcast::channel(4096);
        Ok(Arc::new(Coordinator {
            config,
            clock,
            root,
            topology,
            tanks,
            units,
            events,
            next_command: AtomicU64::new(1),
            eval_report: RwLock::new(None),
        }))
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn topology(&self) -> &FleetTopology {
        &self.topology
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    fn emit(&self, e: Event) {
        // No subscribers is fine.
        let _ = self.events.send(e);
    }

    fn tank(&self, tank_id: &str) -> Result<&Mutex<TankIngest>> {
        self.tanks
            .get(tank_id)
            .ok_or_else(|| Error::UnknownTank(tank_id.to_string()))
    }

    fn unit(&self, unit_id: &str) -> Result<&(String, Mutex<UnitRuntime>)> {
        self.units
            .get(unit_id)
            .ok_or_else(|| Error::UnknownUnit(unit_id.to_string()))
    }

    /// Registers a unit after its hello; `link` carries commands to it.
    pub fn register(&self, hello: &Hello, link: Option<Link>) -> Result<()> {
        let (tank_id, rt) = self.unit(&hello.unit_id)?;
        if *tank_id != hello.tank_id {
            return Err(Error::Protocol(format!(
                "unit {} belongs to {tank_id}, not {}",
                hello.unit_id, hello.tank_id
            )));
        }
        let mut rt = lock(rt);
        if let Some(s) = &hello.state {
            rt.state = Some(s.clone());
        }
        rt.link = link;
        drop(rt);
        self.emit(Event::UnitConnected {
            unit_id: hello.unit_id.clone(),
        });
        Ok(())
    }

    pub fn disconnect(&self, unit_id: &str) {
        if let Some((_, rt)) = self.units.get(unit_id) {
            lock(rt).link = None;
            self.emit(Event::UnitDisconnected {
                unit_id: unit_id.to_string(),
            });
        }
    }

    /// Stores a telemetry message exactly once and feeds the tank's
    /// ordering point.
    pub fn ingest(&self, msg: TelemetryMessage) -> Result<IngestOutcome> {
        let (tank_id, rt) = self.unit(&msg.unit_id)?;
        msg.validate()?;
        let mut tank = lock(self.tank(tank_id)?);
        if tank.ordering.is_duplicate(&msg.unit_id, msg.frame_id) {
            tank.ordering.offer(&msg);
            return Ok(IngestOutcome {
                admission: Admission::Duplicate,
                position: None,
            });
        }
        match (msg.mode, tank.first_subsurface_frame.get(&msg.unit_id)) {
            (OperationalMode::Surface, Some(&first)) if msg.frame_id > first => {
                return Err(Error::Protocol(format!(
                    "unit {} reported surface frame {} after sub-surface frame {first}",
                    msg.unit_id, msg.frame_id
                )));
            }
            (OperationalMode::SubSurface, prev) if prev.is_none_or(|p| msg.frame_id < *p) => {
                tank.first_subsurface_frame.insert(msg.unit_id.clone(), msg.frame_id);
            }
            _ => {}
        }
        let seq = tank.next_seq;
        let env = RecordEnvelope::from_payload(RecordType::Telemetry, msg.timestamp, &msg)?
            .with_tank(tank_id.as_str())
            .with_unit(msg.unit_id.as_str())
            .with_source("unit")
            .with_seq(seq);
        let position = tank.store.append_unit(&msg.unit_id, &env)?;
        tank.next_seq += 1;
        let (admission, applied) = tank.ordering.offer(&msg);
        if msg.mode == OperationalMode::SubSurface {
            tank.mode = OperationalMode::SubSurface;
        }
        self.after_update(&mut tank, applied)?;
        drop(tank);

        let mut rt = lock(rt);
        rt.stored_records += 1;
        if rt.last_frame_id.is_none_or(|f| msg.frame_id > f) {
            rt.last_frame_id = Some(msg.frame_id);
            rt.last_timestamp = Some(msg.timestamp);
        }
        if let Some(s) = &mut rt.state {
            s.last_frame_time = Some(s.last_frame_time.map_or(msg.timestamp, |t| t.max(msg.timestamp)));
        }
        drop(rt);
        self.emit(Event::Telemetry {
            tank_id: tank_id.clone(),
            unit_id: msg.unit_id,
            frame_id: msg.frame_id,
            timestamp: msg.timestamp,
        });
        Ok(IngestOutcome {
            admission,
            position: Some(position),
        })
    }

    fn after_update(&self, tank: &mut TankIngest, applied: usize) -> Result<()> {
        if applied > 0 {
            tank.cached = None;
            tank.applied_since_snapshot += applied as u64;
            self.emit(Event::SeriesUpdated {
                tank_id: tank.tank_id.clone(),
                points: applied,
            });
        }
        for alert in tank.ordering.take_new_alerts() {
            let env = RecordEnvelope::from_payload(RecordType::Alert, alert.time, &alert)?
                .with_tank(tank.tank_id.as_str())
                .with_source("coordinator");
            let tank_id = tank.tank_id.clone();
            tank.store.append_alert(&tank_id, &env)?;
            self.emit(Event::Alert { alert });
        }
        if self.config.snapshot_every > 0 && tank.applied_since_snapshot >= self.config.snapshot_every {
            Self::write_snapshot(tank)?;
        }
        Ok(())
    }

    fn write_snapshot(tank: &mut TankIngest) -> Result<()> {
        let snap = Self::snapshot_of(tank);
        tank.store.write_snapshot(&tank.tank_id, snap.as_ref())?;
        tank.applied_since_snapshot = 0;
        Ok(())
    }

    fn snapshot_of(tank: &mut TankIngest) -> Arc<SeriesSnapshot> {
        tank.cached
            .get_or_insert_with(|| Arc::new(tank.ordering.series().snapshot()))
            .clone()
    }

    /// Records a manual count; the first one at the start of the
    /// sub-surface segment calibrates the tank estimates.
    pub fn add_manual_count(&self, tank_id: &str, manual: ManualCount) -> Result<Option<Calibration>> {
        if !manual.time.is_finite() {
            return Err(Error::InvalidArgument("manual count time must be finite".into()));
        }
        let mut tank = lock(self.tank(tank_id)?);
        let seq = tank.next_seq;
        let env = RecordEnvelope::from_payload(RecordType::ManualCount, manual.time, &manual)?
            .with_tank(tank_id)
            .with_source("operator")
            .with_seq(seq);
        tank.store.append_manual_count(tank_id, &env)?;
        tank.next_seq += 1;
        tank.ordering.manual_count(manual.clone());
        tank.cached = None;
        let calibration = tank.ordering.series().calibration;
        self.after_update(&mut tank, 0)?;
        drop(tank);
        self.emit(Event::ManualCount {
            tank_id: tank_id.to_string(),
            manual,
            calibration,
        });
        Ok(calibration)
    }

    /// Applies buffered telemetry, closes calibration windows, writes every
    /// tank snapshot and syncs the logs.
    pub fn finalize(&self) -> Result<()> {
        for t in self.tanks.values() {
            let mut tank = lock(t);
            let applied = tank.ordering.flush_all();
            tank.cached = None;
            self.after_update(&mut tank, applied)?;
            Self::write_snapshot(&mut tank)?;
            tank.store.sync_all()?;
        }
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        self.tanks.values().try_for_each(|t| lock(t).store.sync_all())
    }

    pub fn series(&self, tank_id: &str) -> Result<Arc<SeriesSnapshot>> {
        let mut tank = lock(self.tank(tank_id)?);
        Ok(Self::snapshot_of(&mut tank))
    }

    pub fn unit_series(&self, unit_id: &str) -> Result<Option<SeriesSnapshot>> {
        let (tank_id, _) = self.unit(unit_id)?;
        let tank = lock(self.tank(tank_id)?);
        Ok(tank.ordering.unit_series(unit_id).map(|s| s.snapshot()))
    }

    pub fn tank_stats(&self, tank_id: &str) -> Result<OrderingStats> {
        Ok(lock(self.tank(tank_id)?).ordering.stats())
    }

    pub fn tank_summary(&self, tank_id: &str) -> Result<TankSummary> {
        let mut tank = lock(self.tank(tank_id)?);
        let snap = Self::snapshot_of(&mut tank);
        let series = tank.ordering.series();
        Ok(TankSummary {
            tank_id: tank_id.to_string(),
            mode: tank.mode.max(snap.mode),
            health: series.health,
            latest_fertilization: snap.fertilization.iter().rev().find_map(|r| r.rolling_mean),
            latest_tank_estimate: snap.counts.iter().rev().find_map(|r| r.rolling_mean),
            calibration: snap.calibration,
            units: self
                .topology
                .tanks
                .iter()
                .find(|t| t.tank_id == tank_id)
                .map(|t| t.unit_ids.clone())
                .unwrap_or_default(),
            open_alerts: series.alerts.iter().filter(|a| !a.acknowledged).count(),
            stats: tank.ordering.stats(),
        })
    }

    pub fn tanks(&self) -> Vec<TankSummary> {
        self.tanks.keys().filter_map(|id| self.tank_summary(id).ok()).collect()
    }

    pub fn units(&self) -> Vec<UnitStatus> {
        self.units
            .iter()
            .map(|(id, (tank_id, rt))| {
                let rt = lock(rt);
                UnitStatus {
                    unit_id: id.clone(),
                    tank_id: tank_id.clone(),
                    connected: rt.link.as_ref().is_some_and(|l| !l.is_closed()),
                    state: rt.state.clone(),
                    last_frame_id: rt.last_frame_id,
                    last_timestamp: rt.last_timestamp,
                    stored_records: rt.stored_records,
                }
            })
            .collect()
    }

    pub fn alerts(&self, tank_id: Option<&str>) -> Result<Vec<Alert>> {
        let ids: Vec<&String> = match tank_id {
            Some(t) => vec![
                self.tanks
                    .get_key_value(t)
                    .ok_or_else(|| Error::UnknownTank(t.to_string()))?
                    .0,
            ],
            None => self.tanks.keys().collect(),
        };
        Ok(ids
            .into_iter()
            .flat_map(|id| lock(&self.tanks[id]).ordering.series().alerts.clone())
            .collect())
    }

    pub fn acknowledge_alert(&self, tank_id: &str, alert_id: u64) -> Result<bool> {
        let mut tank = lock(self.tank(tank_id)?);
        if !tank.ordering.series_mut().acknowledge_alert(alert_id) {
            return Ok(false);
        }
        let now = self.clock.now();
        let env = RecordEnvelope::new(RecordType::Alert, now, serde_json::json!({"acknowledged": alert_id}))
            .with_tank(tank_id)
            .with_source("operator");
        tank.store.append_alert(tank_id, &env)?;
        drop(tank);
        self.emit(Event::AlertAcknowledged {
            tank_id: tank_id.to_string(),
            alert_id,
        });
        Ok(true)
    }

    pub fn set_eval_report(&self, report: serde_json::Value) {
        *self.eval_report.write().unwrap_or_else(|p| p.into_inner()) = Some(report);
    }

    pub fn eval_report(&self) -> Option<serde_json::Value> {
        self.eval_report.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Sends a command to its target units and collects one acknowledgement
    /// per unit. Mode regressions are refused before anything is sent.
    pub async fn dispatch(&self, target: Target, verb: Verb) -> Result<Vec<Ack>> {
        let unit_ids: Vec<String> = match &target {
            Target::Unit { unit_id } => {
                self.unit(unit_id)?;
                vec![unit_id.clone()]
            }
            Target::Tank { tank_id } => self
                .topology
                .tanks
                .iter()
                .find(|t| &t.tank_id == tank_id)
                .ok_or_else(|| Error::UnknownTank(tank_id.clone()))?
                .unit_ids
                .clone(),
        };
        if let Verb::SetMode { mode } = verb {
            for u in &unit_ids {
                let (tank_id, rt) = self.unit(u)?;
                let unit_mode = lock(rt).state.as_ref().map(|s| s.mode);
                let tank_mode = lock(self.tank(tank_id)?).mode;
                let current = unit_mode.map_or(tank_mode, |m| m.max(tank_mode));
                if !current.can_transition_to(mode) {
                    return Err(Error::IllegalTransition {
                        from: current,
                        to: mode,
                    });
                }
            }
        }
        let command_id = self.next_command.fetch_add(1, Ordering::SeqCst);
        let timeout = self.config.command_timeout;
        let sends = unit_ids.iter().map(|u| {
            let link = lock(&self.units[u].1).link.clone();
            let cmd = CommandMessage {
                command_id,
                target: Target::Unit { unit_id: u.clone() },
                verb,
            };
            async move {
                let Some(link) = link else {
                    return Ack::timeout(command_id, u, "unit not connected");
                };
                let (tx, rx) = oneshot::channel();
                if link
                    .send(LinkRequest {
                        command: cmd,
                        reply: tx,
                    })
                    .await
                    .is_err()
                {
                    return Ack::timeout(command_id, u, "unit link closed");
                }
                match tokio::time::timeout(timeout, rx).await {
                    Ok(Ok(ack)) => ack,
                    Ok(Err(_)) => Ack::timeout(command_id, u, "unit dropped the command"),
                    Err(_) => Ack::timeout(command_id, u, format!("no acknowledgement within {timeout:?}")),
                }
            }
        });
        let acks = futures::future::join_all(sends).await;
        for ack in &acks {
            if ack.status != AckStatus::Ok {
                continue;
            }
            if let Some(state) = &ack.state {
                let (tank_id, rt) = self.unit(&ack.unit_id)?;
                lock(rt).state = Some(state.clone());
                let mut tank = lock(self.tank(tank_id)?);
                tank.mode = tank.mode.max(state.mode);
            }
        }
        self.emit(Event::Command { acks: acks.clone() });
        Ok(acks)
    }
}

/// Rebuilds a tank's ordering point from the stored records alone, feeding
/// telemetry and manual counts back in their original arrival order.
pub fn replay_tank(root: impl AsRef<Path>, tank_id: &str, config: &CoordinatorConfig) -> Result<OrderingPoint> {
    let store = RunStore::open(root)?;
    let filter = ScanFilter {
        record_types: Some(vec![RecordType::Telemetry, RecordType::ManualCount]),
        ..ScanFilter::default()
    }
    .tank(tank_id);
    let scanned = store.scan_all(&filter)?;
    if let Some(c) = scanned.corrupt.first() {
        return Err(Error::Protocol(format!(
            "corrupt record at {}:{}: {}",
            c.path.display(),
            c.position,
            c.reason
        )));
    }
    let mut records: Vec<RecordEnvelope> = scanned.envelopes().collect();
    records.sort_by_key(|r| r.seq);
    let mut op = OrderingPoint::new(tank_id, config.reorder_window_s, config.series, config.per_unit_series);
    for r in records {
        match r.record_type {
            RecordType::Telemetry => {
                op.offer(&r.payload_as::<TelemetryMessage>()?);
            }
            RecordType::ManualCount => op.manual_count(r.payload_as()?),
            _ => {}
        }
    }
    op.flush_all();
    Ok(op)
}
