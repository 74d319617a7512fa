//! Scenario and tool configuration files (TOML).

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spawnwatch_core::analytics::{LaborParams, SeriesConfig};
use spawnwatch_core::detect::{DetectorNoise, ReferenceParams};
use spawnwatch_core::evalkit::MatchConfig;
use spawnwatch_core::fleet::CoordinatorConfig;
use spawnwatch_core::raster::RenderConfig;
use spawnwatch_core::simtank::{FocusBand, TankConfig};
use spawnwatch_core::{Error, OperationalMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManualCountPlan {
    pub enabled: bool,
    pub samples: usize,
    pub sample_ml: f64,
    /// Times in simulated seconds. Empty means stocking and the start of the
    /// sub-surface phase.
    pub times: Vec<f64>,
}

impl Default for ManualCountPlan {
    fn default() -> Self {
        ManualCountPlan {
            enabled: true,
            samples: 6,
            sample_ml: 5.0,
            times: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub duration_s: f64,
    pub capture_interval_s: f64,
    pub units: usize,
    /// Integration step of the tank simulator.
    pub step_s: f64,
    pub tank: TankConfig,
    pub focus: FocusBand,
    /// Write a PGM raster next to every truth record.
    pub render: Option<RenderConfig>,
    pub manual_counts: ManualCountPlan,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "default".into(),
            duration_s: 3600.0,
            capture_interval_s: 10.0,
            units: 1,
            step_s: 10.0,
            tank: TankConfig::default(),
            focus: FocusBand::default(),
            render: None,
            manual_counts: ManualCountPlan::default(),
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
        let s: Scenario = toml::from_str(&text).with_context(|| format!("parsing scenario {}", path.display()))?;
        s.validate()
            .with_context(|| format!("invalid scenario {}", path.display()))?;
        Ok(s)
    }

    /// Every violated field is reported, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            errs.push("duration_s must be finite and >= 0".to_string());
        }
        if !(self.capture_interval_s > 0.0) {
            errs.push("capture_interval_s must be > 0".to_string());
        }
        if self.units == 0 {
            errs.push("units must be >= 1".to_string());
        }
        if !(self.step_s > 0.0) {
            errs.push("step_s must be > 0".to_string());
        }
        if !(self.focus.depth_min >= 0.0 && self.focus.depth_min <= self.focus.depth_max) {
            errs.push("focus must satisfy 0 <= depth_min <= depth_max".to_string());
        }
        let m = &self.manual_counts;
        if m.enabled && (m.samples == 0 || !(m.sample_ml > 0.0)) {
            errs.push("manual_counts needs samples >= 1 and sample_ml > 0".to_string());
        }
        if m.times.iter().any(|t| !(*t >= 0.0)) {
            errs.push("manual_counts.times must be >= 0".to_string());
        }
        if let Some(r) = &self.render {
            if r.width == 0 || r.height == 0 {
                errs.push("render dimensions must be positive".to_string());
            }
        }
        if let Err(Error::InvalidConfig(tank)) = self.tank.validate() {
            errs.extend(tank.into_iter().map(|e| format!("tank.{e}")));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("{}", errs.join("; "))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub surface: DetectorNoise,
    pub subsurface: DetectorNoise,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let mut surface = DetectorNoise::identity(OperationalMode::Surface).with_uniform_confusion(0.05);
        surface.miss_rate = 0.1;
        surface.false_positive_rate_per_frame = 0.5;
        surface.box_jitter_sigma = 0.005;
        surface.confidence = Default::default();
        let mut subsurface = DetectorNoise::identity(OperationalMode::SubSurface);
        subsurface.miss_rate = 0.1;
        subsurface.false_positive_rate_per_frame = 0.5;
        subsurface.box_jitter_sigma = 0.005;
        subsurface.confidence = Default::default();
        NoiseConfig { surface, subsurface }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSection {
    pub tanks: usize,
    pub units_per_tank: usize,
    pub coordinator: CoordinatorConfig,
    pub api_addr: String,
    pub unit_addr: String,
    /// Bearer token for write endpoints. Kept out of manifests.
    #[serde(skip_serializing)]
    pub token: Option<String>,
}

impl Default for FleetSection {
    fn default() -> Self {
        FleetSection {
            tanks: 1,
            units_per_tank: 1,
            coordinator: CoordinatorConfig::default(),
            api_addr: "127.0.0.1:8080".into(),
            unit_addr: "127.0.0.1:7070".into(),
            token: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub series: SeriesConfig,
    pub labor: LaborParams,
    pub matching: MatchConfig,
    pub noise: NoiseConfig,
    pub reference: ReferenceParams,
    pub fleet: FleetSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let c: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        c.validate()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(e) = self.matching.validate() {
            errs.push(format!("matching: {e}"));
        }
        if let Err(e) = self.noise.surface.validate() {
            errs.push(format!("noise.surface: {e}"));
        }
        if self.noise.surface.mode() != Some(OperationalMode::Surface) {
            errs.push("noise.surface must use the 6-class surface taxonomy".into());
        }
        if let Err(e) = self.noise.subsurface.validate() {
            errs.push(format!("noise.subsurface: {e}"));
        }
        if self.noise.subsurface.mode() != Some(OperationalMode::SubSurface) {
            errs.push("noise.subsurface must use the 1-class sub-surface taxonomy".into());
        }
        if self.series.surface_window == 0 || self.series.subsurface_window == 0 {
            errs.push("series windows must be >= 1".into());
        }
        if self.fleet.tanks == 0 || self.fleet.units_per_tank == 0 {
            errs.push("fleet.tanks and fleet.units_per_tank must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("{}", errs.join("; "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Scenario::default().validate().unwrap();
        Config::default().validate().unwrap();
    }

    #[test]
    fn every_bad_field_is_named() {
        let s = Scenario {
            capture_interval_s: 0.0,
            units: 0,
            tank: TankConfig {
                volume_liters: -1.0,
                ..TankConfig::default()
            },
            ..Scenario::default()
        };
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.contains("capture_interval_s"), "{msg}");
        assert!(msg.contains("units"), "{msg}");
        assert!(msg.contains("tank.volume_liters"), "{msg}");
    }

    #[test]
    fn unknown_scenario_keys_are_rejected() {
        assert!(toml::from_str::<Scenario>("duraton_s = 5").is_err());
        let s: Scenario = toml::from_str("duration_s = 0\n[tank]\nvolume_liters = 5.0").unwrap();
        assert_eq!(s.tank.volume_liters, 5.0);
        assert_eq!(s.capture_interval_s, 10.0);
    }

    #[test]
    fn config_round_trips_without_token() {
        let mut c = Config::default();
        c.fleet.token = Some("secret".into());
        let text = toml::to_string(&c).unwrap();
        assert!(!text.contains("secret"));
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back.noise, c.noise);
        assert_eq!(back.labor, c.labor);
    }
}
