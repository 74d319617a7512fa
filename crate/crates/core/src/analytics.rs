//! Culture-health analytics: fertilization success, rolling statistics,
//! scaling-factor tank counts, RMSE against references, culture-health
//! classification, harvest allocation and labor accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OperationalMode, StageCounts};

/// Fraction of viable spawn that is fertilized. Damaged counts are
/// nonviable and excluded; `None` when there are no viable counts.
pub fn fertilization_success(counts: &StageCounts) -> Option<f64> {
    let denom = counts.viable();
    (denom > 0).then(|| counts.fertilized() as f64 / denom as f64)
}

/// Inclusive index range of the window ending at (trailing) or centered on `i`.
fn window_bounds(i: usize, n: usize, window: usize, centered: bool) -> (usize, usize) {
    if centered {
        let left = window / 2;
        let right = window - 1 - left;
        (i.saturating_sub(left), (i + right).min(n - 1))
    } else {
        (i + 1 - window.min(i + 1), i)
    }
}

fn check_series(series: &[Option<f64>], window: usize) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("rolling window must be >= 1".into()));
    }
    Ok(())
}

fn window_values(series: &[Option<f64>], lo: usize, hi: usize) -> impl Iterator<Item = f64> + '_ {
    series[lo..=hi].iter().filter_map(|v| *v)
}

/// Rolling mean over trailing or centered windows. Windows are clipped at
/// the series edges, undefined points are skipped, and a window with no
/// defined point yields `None`.
pub fn rolling_mean(series: &[Option<f64>], window: usize, centered: bool) -> Result<Vec<Option<f64>>> {
    check_series(series, window)?;
    let n = series.len();
    Ok((0..n)
        .map(|i| {
            let (lo, hi) = window_bounds(i, n, window, centered);
            let (sum, k) = window_values(series, lo, hi).fold((0.0, 0usize), |(s, k), v| (s + v, k + 1));
            (k > 0).then(|| sum / k as f64)
        })
        .collect())
}

/// Population standard deviation over the same windows as [`rolling_mean`].
pub fn rolling_std(series: &[Option<f64>], window: usize, centered: bool) -> Result<Vec<Option<f64>>> {
    check_series(series, window)?;
    let n = series.len();
    Ok((0..n)
        .map(|i| {
            let (lo, hi) = window_bounds(i, n, window, centered);
            let (sum, k) = window_values(series, lo, hi).fold((0.0, 0usize), |(s, k), v| (s + v, k + 1));
            if k == 0 {
                return None;
            }
            let mean = sum / k as f64;
            let ss: f64 = window_values(series, lo, hi).map(|v| (v - mean).powi(2)).sum();
            Some((ss / k as f64).sqrt())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualCount {
    pub time: f64,
    pub tank_total: u64,
    #[serde(default)]
    pub method: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scaling_factor: f64,
    /// Time of the manual count the factor was derived from.
    pub time: f64,
    pub samples: usize,
}

/// `k = manual total / mean image count`.
pub fn calibrate_scaling(manual: &ManualCount, image_counts: &[u64]) -> Result<f64> {
    if image_counts.is_empty() {
        return Err(Error::Calibration(
            "no image counts inside the calibration window".into(),
        ));
    }
    let mean = image_counts.iter().sum::<u64>() as f64 / image_counts.len() as f64;
    if mean <= 0.0 {
        return Err(Error::Calibration("mean image count is zero".into()));
    }
    Ok(manual.tank_total as f64 / mean)
}

/// RMSE between `estimates` and `references`, pairing each reference with
/// the nearest-in-time defined estimate no further than `tolerance_s` away.
pub fn rmse(estimates: &[(f64, Option<f64>)], references: &[(f64, f64)], tolerance_s: f64) -> Result<f64> {
    let defined: Vec<(f64, f64)> = estimates.iter().filter_map(|(t, v)| v.map(|v| (*t, v))).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(rt, rv) in references {
        // Ties in distance go to the earlier estimate.
        let nearest = defined
            .iter()
            .map(|&(t, v)| ((t - rt).abs(), v))
            .filter(|(d, _)| *d <= tolerance_s)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, v)) = nearest {
            sum += (v - rv).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoPairs { tolerance_s });
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CultureHealth {
    Successful,
    Deteriorating,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HealthConfig {
    pub theta_hi: f64,
    pub theta_lo: f64,
    /// Trend is fitted over this trailing span (seconds).
    pub horizon_s: f64,
    /// No Deteriorating verdict before this long after the first point.
    pub grace_s: f64,
    /// Slopes (per hour) above `-flat_tolerance` count as non-negative.
    pub flat_tolerance_per_hour: f64,
    /// Slopes (per hour) below this are a strong decline.
    pub strong_decline_per_hour: f64,
    /// Minimum number of defined points before any verdict.
    pub min_points: usize,
}

impl Default for HealthConfig {
    fn default() -> Self {
        HealthConfig {
            theta_hi: 0.7,
            theta_lo: 0.4,
            horizon_s: 2.0 * 3600.0,
            grace_s: 3600.0,
            flat_tolerance_per_hour: 0.02,
            strong_decline_per_hour: -0.1,
            min_points: 20,
        }
    }
}

/// Least-squares slope of `(t, v)` in value units per hour.
fn slope_per_hour(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mt = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mv = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for &(t, v) in points {
        num += (t - mt) * (v - mv);
        den += (t - mt) * (t - mt);
    }
    (den > 0.0).then(|| num / den * 3600.0)
}

/// Classifies a rolling fertilization curve from its latest level and
/// recent trend. Decisions depend on time, not on sample cadence.
pub fn classify_culture(series: &[(f64, Option<f64>)], cfg: &HealthConfig) -> CultureHealth {
    let defined: Vec<(f64, f64)> = series.iter().filter_map(|(t, v)| v.map(|v| (*t, v))).collect();
    if defined.len() < cfg.min_points.max(2) {
        return CultureHealth::Indeterminate;
    }
    let (t_first, t_last) = (defined[0].0, defined[defined.len() - 1].0);
    let level = defined[defined.len() - 1].1;
    let recent: Vec<(f64, f64)> = defined
        .iter()
        .copied()
        .filter(|(t, _)| *t >= t_last - cfg.horizon_s)
        .collect();
    let Some(slope) = slope_per_hour(&recent) else {
        return CultureHealth::Indeterminate;
    };
    let past_grace = t_last - t_first >= cfg.grace_s;
    if level > cfg.theta_hi && slope >= -cfg.flat_tolerance_per_hour {
        CultureHealth::Successful
    } else if past_grace && (level < cfg.theta_lo || slope <= cfg.strong_decline_per_hour) {
        CultureHealth::Deteriorating
    } else {
        CultureHealth::Indeterminate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub id: u64,
    pub tank_id: String,
    pub time: f64,
    pub status: CultureHealth,
    pub message: String,
    #[serde(default)]
    pub acknowledged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarvestPlan {
    pub required_larvae: f64,
    pub proportion: f64,
    /// The tank holds fewer larvae than required.
    pub shortfall: bool,
}

pub fn harvest_plan(
    tank_estimate: f64,
    substrate_units: f64,
    target_density_per_liter: f64,
    settlement_tank_liters: f64,
) -> Result<HarvestPlan> {
    if !(tank_estimate > 0.0) {
        return Err(Error::InvalidArgument("tank estimate must be > 0".into()));
    }
    if !(substrate_units > 0.0 && target_density_per_liter > 0.0 && settlement_tank_liters > 0.0) {
        return Err(Error::InvalidArgument("harvest inputs must be > 0".into()));
    }
    let required = substrate_units * target_density_per_liter * settlement_tank_liters;
    let ratio = required / tank_estimate;
    Ok(HarvestPlan {
        required_larvae: required,
        proportion: ratio.min(1.0),
        shortfall: ratio > 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaborParams {
    pub n_tanks: f64,
    pub surface_hours: f64,
    pub surface_samples_per_hour: f64,
    pub subsurface_days: f64,
    pub minutes_per_sample: f64,
    pub operator_hours: f64,
}

impl Default for LaborParams {
    /// Facility-scale defaults: 60 tanks, 12 h surface at 12 samples/h, six
    /// days sub-surface at one sample per hour, 20 min per sample, 40 h of
    /// operator time.
    fn default() -> Self {
        LaborParams {
            n_tanks: 60.0,
            surface_hours: 12.0,
            surface_samples_per_hour: 12.0,
            subsurface_days: 6.0,
            minutes_per_sample: 20.0,
            operator_hours: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaborReport {
    pub samples_per_tank: f64,
    pub manual_hours: f64,
    pub hours_saved: f64,
}

pub fn labor_report(p: &LaborParams) -> Result<LaborReport> {
    let fields = [
        p.n_tanks,
        p.surface_hours,
        p.surface_samples_per_hour,
        p.subsurface_days,
        p.minutes_per_sample,
        p.operator_hours,
    ];
    if fields.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("labor inputs must be non-negative".into()));
    }
    let samples_per_tank = p.surface_hours * p.surface_samples_per_hour + p.subsurface_days * 24.0;
    let manual_hours = p.n_tanks * samples_per_tank * p.minutes_per_sample / 60.0;
    Ok(LaborReport {
        samples_per_tank,
        manual_hours,
        hours_saved: manual_hours - p.operator_hours,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FertilizationPoint {
    pub time: f64,
    pub f: Option<f64>,
    pub counts: StageCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TankCountPoint {
    pub time: f64,
    pub image_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeriesConfig {
    pub surface_window: usize,
    pub subsurface_window: usize,
    /// Half-width of the calibration window around the manual count.
    pub calibration_window_s: f64,
    pub health: HealthConfig,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig {
            surface_window: 20,
            subsurface_window: 40,
            calibration_window_s: 30.0 * 60.0,
            health: HealthConfig::default(),
        }
    }
}

/// Per-tank time series. Points are expected in time order; the coordinator
/// guarantees this through its reordering window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankSeries {
    pub tank_id: String,
    pub config: SeriesConfig,
    /// Start time of the sub-surface segment, once known.
    pub subsurface_start: Option<f64>,
    pub fertilization: Vec<FertilizationPoint>,
    pub counts: Vec<TankCountPoint>,
    pub manual_counts: Vec<ManualCount>,
    pub calibration: Option<Calibration>,
    pub health: CultureHealth,
    pub alerts: Vec<Alert>,
    next_alert_id: u64,
}

impl TankSeries {
    pub fn new(tank_id: impl Into<String>, config: SeriesConfig) -> Self {
        TankSeries {
            tank_id: tank_id.into(),
            config,
            subsurface_start: None,
            fertilization: Vec::new(),
            counts: Vec::new(),
            manual_counts: Vec::new(),
            calibration: None,
            health: CultureHealth::Indeterminate,
            alerts: Vec::new(),
            next_alert_id: 1,
        }
    }

    pub fn mode(&self) -> OperationalMode {
        if self.subsurface_start.is_some() {
            OperationalMode::SubSurface
        } else {
            OperationalMode::Surface
        }
    }

    pub fn push_fertilization(&mut self, time: f64, counts: StageCounts) {
        self.fertilization.push(FertilizationPoint {
            time,
            f: fertilization_success(&counts),
            counts,
        });
        self.update_health(time);
    }

    pub fn push_count(&mut self, time: f64, image_count: u64) {
        if self.subsurface_start.is_none() {
            self.subsurface_start = Some(time);
        }
        self.counts.push(TankCountPoint { time, image_count });
        self.try_calibrate(false);
    }

    /// Records a manual count; calibration uses the first manual count at or
    /// after the start of the sub-surface segment.
    pub fn add_manual_count(&mut self, manual: ManualCount) {
        self.manual_counts.push(manual);
        self.try_calibrate(false);
    }

    /// Calibrates with whatever lies inside a still-open window (end of run).
    pub fn finalize(&mut self) {
        self.try_calibrate(true);
    }

    fn calibration_anchor(&self) -> Option<&ManualCount> {
        let start = self.subsurface_start?;
        self.manual_counts
            .iter()
            .filter(|m| m.time >= start - self.config.calibration_window_s)
            .min_by(|a, b| a.time.total_cmp(&b.time))
    }

    fn try_calibrate(&mut self, force: bool) {
        if self.calibration.is_some() {
            return;
        }
        let Some(anchor) = self.calibration_anchor().cloned() else {
            return;
        };
        let half = self.config.calibration_window_s;
        let latest = self.counts.last().map_or(f64::NEG_INFINITY, |c| c.time);
        // Wait until the window has closed so every in-window frame contributes.
        if !force && latest < anchor.time + half {
            return;
        }
        let near: Vec<u64> = self
            .counts
            .iter()
            .filter(|c| (c.time - anchor.time).abs() <= half)
            .map(|c| c.image_count)
            .collect();
        if let Ok(k) = calibrate_scaling(&anchor, &near) {
            self.calibration = Some(Calibration {
                scaling_factor: k,
                time: anchor.time,
                samples: near.len(),
            });
        }
    }

    fn update_health(&mut self, time: f64) {
        let Ok(rolling) = self.rolling_fertilization() else {
            return;
        };
        let status = classify_culture(&rolling, &self.config.health);
        if status != self.health {
            if status == CultureHealth::Deteriorating {
                let id = self.next_alert_id;
                self.next_alert_id += 1;
                let level = rolling.iter().rev().find_map(|(_, v)| *v).unwrap_or(f64::NAN);
                self.alerts.push(Alert {
                    id,
                    tank_id: self.tank_id.clone(),
                    time,
                    status,
                    message: format!("fertilization success deteriorating (rolling f = {level:.3})"),
                    acknowledged: false,
                });
            }
            self.health = status;
        }
    }

    /// Trailing rolling mean of f paired with point times.
    pub fn rolling_fertilization(&self) -> Result<Vec<(f64, Option<f64>)>> {
        let raw: Vec<Option<f64>> = self.fertilization.iter().map(|p| p.f).collect();
        let mean = rolling_mean(&raw, self.config.surface_window, false)?;
        Ok(self.fertilization.iter().map(|p| p.time).zip(mean).collect())
    }

    pub fn acknowledge_alert(&mut self, id: u64) -> bool {
        match self.alerts.iter_mut().find(|a| a.id == id) {
            Some(a) => {
                a.acknowledged = true;
                true
            }
            None => false,
        }
    }

    /// Derived view with rolling statistics and tank estimates.
    pub fn snapshot(&self) -> SeriesSnapshot {
        let f_raw: Vec<Option<f64>> = self.fertilization.iter().map(|p| p.f).collect();
        let w = self.config.surface_window;
        let (f_mean, f_std) = if f_raw.is_empty() {
            (vec![], vec![])
        } else {
            (
                rolling_mean(&f_raw, w, false).expect("non-empty"),
                rolling_std(&f_raw, w, false).expect("non-empty"),
            )
        };
        let fertilization = self
            .fertilization
            .iter()
            .zip(f_mean.into_iter().zip(f_std))
            .map(|(p, (m, s))| FertilizationRow {
                time: p.time,
                f: p.f,
                rolling_mean: m,
                rolling_std: s,
                counts: p.counts,
            })
            .collect();

        let k = self.calibration.map(|c| c.scaling_factor);
        let raw: Vec<Option<f64>> = self.counts.iter().map(|c| Some(c.image_count as f64)).collect();
        let w = self.config.subsurface_window;
        let (c_mean, c_std) = if raw.is_empty() {
            (vec![], vec![])
        } else {
            (
                rolling_mean(&raw, w, true).expect("non-empty"),
                rolling_std(&raw, w, true).expect("non-empty"),
            )
        };
        let counts = self
            .counts
            .iter()
            .zip(c_mean.into_iter().zip(c_std))
            .map(|(c, (m, s))| TankCountRow {
                time: c.time,
                image_count: c.image_count,
                tank_estimate: k.map(|k| k * c.image_count as f64),
                rolling_mean: k.and_then(|k| m.map(|m| k * m)),
                rolling_std: k.and_then(|k| s.map(|s| k * s)),
            })
            .collect();
        SeriesSnapshot {
            tank_id: self.tank_id.clone(),
            mode: self.mode(),
            health: self.health,
            calibration: self.calibration,
            fertilization,
            counts,
            manual_counts: self.manual_counts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FertilizationRow {
    pub time: f64,
    pub f: Option<f64>,
    pub rolling_mean: Option<f64>,
    pub rolling_std: Option<f64>,
    pub counts: StageCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankCountRow {
    pub time: f64,
    pub image_count: u64,
    pub tank_estimate: Option<f64>,
    /// Scaled centered rolling mean of image counts.
    pub rolling_mean: Option<f64>,
    pub rolling_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSnapshot {
    pub tank_id: String,
    pub mode: OperationalMode,
    pub health: CultureHealth,
    pub calibration: Option<Calibration>,
    pub fertilization: Vec<FertilizationRow>,
    pub counts: Vec<TankCountRow>,
    pub manual_counts: Vec<ManualCount>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

impl SeriesSnapshot {
    /// Whitespace-separated curve table: time, value, rolling mean, and the
    /// ±1σ band.
    pub fn fertilization_table(&self) -> String {
        let mut s = String::from("# time_s f rolling_mean lower upper\n");
        for r in &self.fertilization {
            let band = r.rolling_mean.zip(r.rolling_std);
            let _ = writeln!(
                s,
                "{:.1} {} {} {} {}",
                r.time,
                cell(r.f),
                cell(r.rolling_mean),
                cell(band.map(|(m, sd)| m - sd)),
                cell(band.map(|(m, sd)| m + sd)),
            );
        }
        s
    }

    pub fn count_table(&self) -> String {
        let mut s = String::from("# time_s image_count tank_estimate rolling_mean lower upper\n");
        for r in &self.counts {
            let band = r.rolling_mean.zip(r.rolling_std);
            let _ = writeln!(
                s,
                "{:.1} {} {} {} {} {}",
                r.time,
                r.image_count,
                cell(r.tank_estimate),
                cell(r.rolling_mean),
                cell(band.map(|(m, sd)| m - sd)),
                cell(band.map(|(m, sd)| m + sd)),
            );
        }
        s
    }

    pub fn manual_table(&self) -> String {
        let mut s = String::from("# time_s tank_total\n");
        for m in &self.manual_counts {
            let _ = writeln!(s, "{:.1} {}", m.time, m.tank_total);
        }
        s
    }

    /// Rolling tank estimates paired with their times.
    pub fn rolling_estimates(&self) -> Vec<(f64, Option<f64>)> {
        self.counts.iter().map(|r| (r.time, r.rolling_mean)).collect()
    }

    pub fn rolling_fertilization(&self) -> Vec<(f64, Option<f64>)> {
        self.fertilization.iter().map(|r| (r.time, r.rolling_mean)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(e: u64, c: u64, t: u64, f: u64, a: u64, d: u64) -> StageCounts {
        StageCounts {
            eggs: e,
            first_cleavage: c,
            two_cell: t,
            four_eight_cell: f,
            advanced: a,
            damaged: d,
        }
    }

    #[test]
    fn fertilization_examples() {
        assert_eq!(fertilization_success(&counts(10, 0, 0, 0, 0, 0)), Some(0.0));
        assert_eq!(fertilization_success(&counts(0, 0, 0, 0, 10, 0)), Some(1.0));
        assert_eq!(fertilization_success(&counts(3, 1, 1, 0, 0, 7)), Some(0.4));
        assert_eq!(fertilization_success(&counts(0, 0, 0, 0, 0, 5)), None);
    }

    fn naive_mean(s: &[Option<f64>], w: usize, centered: bool) -> Vec<Option<f64>> {
        let n = s.len() as i64;
        (0..n)
            .map(|i| {
                let (lo, hi) = if centered {
                    let l = (w / 2) as i64;
                    (i - l, i + (w as i64 - 1 - l))
                } else {
                    (i - w as i64 + 1, i)
                };
                let mut vals = Vec::new();
                for j in lo..=hi {
                    if j >= 0 && j < n {
                        if let Some(v) = s[j as usize] {
                            vals.push(v);
                        }
                    }
                }
                if vals.is_empty() {
                    None
                } else {
                    let mut acc = 0.0;
                    for v in &vals {
                        acc += v;
                    }
                    Some(acc / vals.len() as f64)
                }
            })
            .collect()
    }

    fn naive_std(s: &[Option<f64>], w: usize, centered: bool) -> Vec<Option<f64>> {
        let means = naive_mean(s, w, centered);
        let n = s.len() as i64;
        (0..n)
            .map(|i| {
                let m = means[i as usize]?;
                let (lo, hi) = if centered {
                    let l = (w / 2) as i64;
                    (i - l, i + (w as i64 - 1 - l))
                } else {
                    (i - w as i64 + 1, i)
                };
                let mut acc = 0.0;
                let mut k = 0;
                for j in lo.max(0)..=hi.min(n - 1) {
                    if let Some(v) = s[j as usize] {
                        acc += (v - m) * (v - m);
                        k += 1;
                    }
                }
                Some((acc / k as f64).sqrt())
            })
            .collect()
    }

    #[test]
    fn rolling_basic_cases() {
        let c = vec![Some(2.5); 30];
        assert!(rolling_mean(&c, 7, false).unwrap().iter().all(|v| *v == Some(2.5)));
        assert!(rolling_std(&c, 7, true).unwrap().iter().all(|v| *v == Some(0.0)));
        let s: Vec<Option<f64>> = (0..10).map(|i| Some(i as f64 * 1.5)).collect();
        assert_eq!(rolling_mean(&s, 1, false).unwrap(), s);
        assert_eq!(rolling_mean(&s, 1, true).unwrap(), s);
        assert!(rolling_mean(&[], 3, false).is_err());
        assert!(rolling_mean(&s, 0, false).is_err());
        assert_eq!(rolling_mean(&[None, None], 2, false).unwrap(), vec![None, None]);
    }

    #[test]
    fn alternating_std_is_half_gap() {
        let (a, b) = (0.2, 0.9);
        let s: Vec<Option<f64>> = (0..40).map(|i| Some(if i % 2 == 0 { a } else { b })).collect();
        for centered in [false, true] {
            let sd = rolling_std(&s, 6, centered).unwrap();
            for v in &sd[6..34] {
                assert!((v.unwrap() - (a - b).abs() / 2.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn rolling_matches_naive(
            s in proptest::collection::vec(proptest::option::weighted(0.85, -1e3f64..1e3), 1..120),
            w in 1usize..50,
            centered in any::<bool>(),
        ) {
            let fast = rolling_mean(&s, w, centered).unwrap();
            let slow = naive_mean(&s, w, centered);
            for (a, b) in fast.iter().zip(&slow) {
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false, "definedness differs"),
                }
            }
            let fast = rolling_std(&s, w, centered).unwrap();
            let slow = naive_std(&s, w, centered);
            for (a, b) in fast.iter().zip(&slow) {
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false, "definedness differs"),
                }
            }
        }

        #[test]
        fn fertilization_scale_invariant_and_monotone(
            e in 0u64..500, c in 0u64..500, t in 0u64..500, f in 0u64..500, a in 0u64..500, d in 0u64..500,
            m in 1u64..50,
        ) {
            let base = counts(e, c, t, f, a, d);
            let scaled = counts(e * m, c * m, t * m, f * m, a * m, d * m);
            let fb = fertilization_success(&base);
            let fs = fertilization_success(&scaled);
            match (fb, fs) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false),
            }
            if let Some(x) = fb {
                prop_assert!((0.0..=1.0).contains(&x));
                let more_fert = fertilization_success(&counts(e, c + 1, t, f, a, d)).unwrap();
                prop_assert!(more_fert >= x);
                let more_eggs = fertilization_success(&counts(e + 1, c, t, f, a, d)).unwrap();
                prop_assert!(more_eggs <= x);
            }
        }

        #[test]
        fn rmse_matches_naive(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..60),
        ) {
            let est: Vec<(f64, Option<f64>)> = pairs.iter().enumerate().map(|(i, p)| (i as f64 * 60.0, Some(p.0))).collect();
            let refs: Vec<(f64, f64)> = pairs.iter().enumerate().map(|(i, p)| (i as f64 * 60.0 + 5.0, p.1)).collect();
            let got = rmse(&est, &refs, 10.0).unwrap();
            let mut acc = 0.0;
            for p in &pairs {
                acc += (p.0 - p.1) * (p.0 - p.1);
            }
            let want = (acc / pairs.len() as f64).sqrt();
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_examples() {
        let s = vec![(0.0, Some(1.0)), (10.0, Some(2.0))];
        let r = vec![(0.0, 1.0), (10.0, 2.0)];
        assert_eq!(rmse(&s, &r, 600.0).unwrap(), 0.0);
        assert_eq!(rmse(&[(0.0, Some(3.0))], &[(0.0, 7.0)], 600.0).unwrap(), 4.0);
        assert!(matches!(
            rmse(&[(0.0, Some(3.0))], &[(1e4, 7.0)], 600.0),
            Err(Error::NoPairs { .. })
        ));
    }

    #[test]
    fn calibration_examples() {
        let m = ManualCount {
            time: 0.0,
            tank_total: 100_000,
            method: String::new(),
        };
        let k = calibrate_scaling(&m, &[50, 50]).unwrap();
        assert_eq!(k, 2000.0);
        assert_eq!(k * 40.0, 80_000.0);
        assert!(calibrate_scaling(&m, &[0, 0]).is_err());
        assert!(calibrate_scaling(&m, &[]).is_err());
    }

    #[test]
    fn classify_examples() {
        let cfg = HealthConfig::default();
        let rise: Vec<(f64, Option<f64>)> = (0..200)
            .map(|i| (i as f64 * 60.0, Some(0.1 + 0.8 * i as f64 / 199.0)))
            .collect();
        assert_eq!(classify_culture(&rise, &cfg), CultureHealth::Successful);
        let flat: Vec<(f64, Option<f64>)> = (0..200).map(|i| (i as f64 * 60.0, Some(0.2))).collect();
        assert_eq!(classify_culture(&flat, &cfg), CultureHealth::Deteriorating);
        assert_eq!(classify_culture(&flat[..10], &cfg), CultureHealth::Indeterminate);
        // Before the grace period a low level is not yet a verdict.
        let early: Vec<(f64, Option<f64>)> = (0..30).map(|i| (i as f64 * 10.0, Some(0.2))).collect();
        assert_eq!(classify_culture(&early, &cfg), CultureHealth::Indeterminate);
    }

    #[test]
    fn classify_ignores_cadence() {
        let cfg = HealthConfig {
            min_points: 10,
            ..HealthConfig::default()
        };
        let curves: [fn(f64) -> f64; 3] = [|h| 0.1 + 0.8 * (1.0 - (-h / 2.0).exp()), |_| 0.25, |h| 0.9 - 0.2 * h];
        for curve in curves {
            let full: Vec<(f64, Option<f64>)> = (0..400)
                .map(|i| {
                    let t = i as f64 * 30.0;
                    (t, Some(curve(t / 3600.0)))
                })
                .collect();
            let half: Vec<(f64, Option<f64>)> = full.iter().step_by(2).copied().collect();
            assert_eq!(classify_culture(&full, &cfg), classify_culture(&half, &cfg));
        }
    }

    #[test]
    fn harvest_examples() {
        let p = harvest_plan(1000.0, 2.0, 50.0, 10.0).unwrap();
        assert_eq!((p.proportion, p.shortfall), (1.0, false));
        let p = harvest_plan(100_000.0, 2.0, 50.0, 10.0).unwrap();
        assert_eq!(p.required_larvae, 1000.0);
        assert!((p.proportion - 0.01).abs() < 1e-15);
        let p = harvest_plan(500.0, 2.0, 50.0, 10.0).unwrap();
        assert_eq!((p.proportion, p.shortfall), (1.0, true));
        assert!(harvest_plan(0.0, 2.0, 50.0, 10.0).is_err());
    }

    #[test]
    fn labor_examples() {
        let r = labor_report(&LaborParams::default()).unwrap();
        assert_eq!(r.samples_per_tank, 288.0);
        assert_eq!(r.manual_hours, 5760.0);
        assert_eq!(r.hours_saved, 5720.0);
        let none = labor_report(&LaborParams {
            n_tanks: 0.0,
            ..LaborParams::default()
        })
        .unwrap();
        assert_eq!(none.hours_saved, -40.0);
    }

    #[test]
    fn series_calibrates_after_window_closes() {
        let mut s = TankSeries::new("t1", SeriesConfig::default());
        for i in 0..10 {
            s.push_fertilization(i as f64 * 10.0, counts(5, 5, 0, 0, 0, 0));
        }
        let start = 1000.0;
        s.add_manual_count(ManualCount {
            time: start,
            tank_total: 100_000,
            method: "six 5 mL samples".into(),
        });
        for i in 0..=180 {
            s.push_count(start + i as f64 * 10.0, 50);
            if i < 180 {
                assert!(s.calibration.is_none());
            }
        }
        let cal = s.calibration.unwrap();
        assert_eq!(cal.scaling_factor, 2000.0);
        assert_eq!(cal.samples, 181);
        let snap = s.snapshot();
        assert!(snap
            .counts
            .iter()
            .all(|r| r.tank_estimate == Some(2000.0 * r.image_count as f64)));
        assert_eq!(snap.mode, OperationalMode::SubSurface);
        assert!(snap.count_table().lines().count() == 182);
    }

    #[test]
    fn deterioration_raises_one_alert() {
        let mut s = TankSeries::new("t2", SeriesConfig::default());
        for i in 0..1000 {
            s.push_fertilization(i as f64 * 10.0, counts(8, 2, 0, 0, 0, 0));
        }
        assert_eq!(s.health, CultureHealth::Deteriorating);
        assert_eq!(s.alerts.len(), 1);
        assert!(s.acknowledge_alert(1));
        assert!(s.alerts[0].acknowledged);
        assert!(!s.acknowledge_alert(99));
    }
}
