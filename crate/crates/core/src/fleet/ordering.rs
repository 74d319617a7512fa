use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::analytics::{Alert, ManualCount, SeriesConfig, TankSeries};
use crate::model::{OperationalMode, StageCounts};

use super::TelemetryMessage;

/// How the ordering point treated one telemetry message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    /// Same `(unit_id, frame_id)` seen before; dropped.
    Duplicate,
    /// Buffered for in-order application.
    Accepted,
    /// Arrived after its timestamp was already applied; kept out of the series.
    Straggler,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingStats {
    pub accepted: u64,
    pub duplicates: u64,
    pub stragglers: u64,
    pub failed_frames: u64,
    pub applied_points: u64,
}

fn ms(t: f64) -> i64 {
    (t * 1000.0).round() as i64
}

/// Per-tank ordering point: drops duplicate frames, holds telemetry for a
/// bounded reordering window, then applies it to the tank series in
/// timestamp order. Frames of all units sharing a timestamp (to the
/// millisecond) and mode are pooled by summing their counts.
///
/// Pure and deterministic: feeding the same arrivals in the same order
/// always yields the same series.
#[derive(Debug, Clone)]
pub struct OrderingPoint {
    window_s: f64,
    seen: HashSet<(String, u64)>,
    pending: BTreeMap<(i64, OperationalMode), Vec<TelemetryMessage>>,
    max_ts: f64,
    flushed_through: Option<i64>,
    series: TankSeries,
    unit_series: Option<BTreeMap<String, TankSeries>>,
    alerts_reported: usize,
    stats: OrderingStats,
}

impl OrderingPoint {
    pub fn new(tank_id: &str, window_s: f64, config: SeriesConfig, per_unit: bool) -> Self {
        OrderingPoint {
            window_s,
            seen: HashSet::new(),
            pending: BTreeMap::new(),
            max_ts: f64::NEG_INFINITY,
            flushed_through: None,
            series: TankSeries::new(tank_id, config),
            unit_series: per_unit.then(BTreeMap::new),
            alerts_reported: 0,
            stats: OrderingStats::default(),
        }
    }

    pub fn series(&self) -> &TankSeries {
        &self.series
    }

    pub fn series_mut(&mut self) -> &mut TankSeries {
        &mut self.series
    }

    pub fn unit_series(&self, unit_id: &str) -> Option<&TankSeries> {
        self.unit_series.as_ref()?.get(unit_id)
    }

    pub fn stats(&self) -> OrderingStats {
        self.stats
    }

    pub fn is_duplicate(&self, unit_id: &str, frame_id: u64) -> bool {
        self.seen.contains(&(unit_id.to_string(), frame_id))
    }

    /// Offers one message. Returns how it was admitted and how many pooled
    /// points reached the series as a result.
    pub fn offer(&mut self, msg: &TelemetryMessage) -> (Admission, usize) {
        if !self.seen.insert((msg.unit_id.clone(), msg.frame_id)) {
            self.stats.duplicates += 1;
            return (Admission::Duplicate, 0);
        }
        let key = ms(msg.timestamp);
        if self.flushed_through.is_some_and(|f| key <= f) {
            self.stats.stragglers += 1;
            return (Admission::Straggler, 0);
        }
        self.stats.accepted += 1;
        self.pending.entry((key, msg.mode)).or_default().push(msg.clone());
        self.max_ts = self.max_ts.max(msg.timestamp);
        let horizon = ms(self.max_ts - self.window_s);
        (Admission::Accepted, self.flush(|k| k < horizon))
    }

    pub fn manual_count(&mut self, manual: ManualCount) {
        if let Some(units) = &mut self.unit_series {
            for s in units.values_mut() {
                s.add_manual_count(manual.clone());
            }
        }
        self.series.add_manual_count(manual);
    }

    /// Applies everything still buffered and closes any open calibration
    /// window. Call once at end of run.
    pub fn flush_all(&mut self) -> usize {
        let n = self.flush(|_| true);
        self.series.finalize();
        if let Some(units) = &mut self.unit_series {
            units.values_mut().for_each(TankSeries::finalize);
        }
        n
    }

    /// Alerts raised since the previous call.
    pub fn take_new_alerts(&mut self) -> Vec<Alert> {
        let new = self.series.alerts[self.alerts_reported..].to_vec();
        self.alerts_reported = self.series.alerts.len();
        new
    }

    fn flush(&mut self, ready: impl Fn(i64) -> bool) -> usize {
        let mut applied = 0;
        while let Some(entry) = self.pending.first_entry() {
            let (key, mode) = *entry.key();
            if !ready(key) {
                break;
            }
            let group = entry.remove();
            self.flushed_through = Some(self.flushed_through.map_or(key, |f| f.max(key)));
            if self.apply(key as f64 / 1000.0, mode, &group) {
                applied += 1;
            }
        }
        self.stats.applied_points += applied as u64;
        applied
    }

    fn apply(&mut self, time: f64, mode: OperationalMode, group: &[TelemetryMessage]) -> bool {
        let ok: Vec<&TelemetryMessage> = group.iter().filter(|m| m.error.is_none()).collect();
        self.stats.failed_frames += (group.len() - ok.len()) as u64;
        if ok.is_empty() {
            return false;
        }
        match mode {
            OperationalMode::Surface => {
                let pooled = ok
                    .iter()
                    .filter_map(|m| m.counts)
                    .fold(StageCounts::default(), |acc, c| acc.merged(&c));
                self.series.push_fertilization(time, pooled);
            }
            OperationalMode::SubSurface => {
                let pooled: u64 = ok.iter().filter_map(|m| m.in_focus_count).sum();
                self.series.push_count(time, pooled);
            }
        }
        if let Some(units) = &mut self.unit_series {
            for m in ok {
                let s = units.entry(m.unit_id.clone()).or_insert_with(|| {
                    let mut s = TankSeries::new(m.unit_id.clone(), self.series.config);
                    for manual in &self.series.manual_counts {
                        s.add_manual_count(manual.clone());
                    }
                    s
                });
                match (m.counts, m.in_focus_count) {
                    (Some(c), _) => s.push_fertilization(time, c),
                    (None, Some(n)) => s.push_count(time, n),
                    _ => {}
                }
            }
        }
        true
    }
}
