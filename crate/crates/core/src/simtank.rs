//! Synthetic larval rearing tank.
//!
//! The simulator is the ground-truth generator for the rest of the pipeline.
//! Fertilized individuals walk through the embryogenesis stages with
//! exponential dwell times, unfertilized eggs dissolve into `Damaged` with a
//! rate that escalates with every dissolution, and at `t1` the population
//! disperses through the water column. Cameras observe a binomial thinning of
//! the population.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::analytics::ManualCount;
use crate::error::{Error, Result};
use crate::model::{BoundingBox, GroundTruthBox, OperationalMode, PhaseTimeline, StageCounts, StageLabel};

const HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TankConfig {
    pub volume_liters: f64,
    pub stocking_density_per_ml: f64,
    pub fertilized_fraction: f64,
    /// Base dissolution rate of unfertilized eggs, per hour.
    pub damage_rate_per_hour: f64,
    /// Each dissolution multiplies the effective damage rate by `1 + factor`.
    pub dissolution_chain_factor: f64,
    /// Fraction of the tank volume inside a sub-surface camera's view.
    pub fov_volume_fraction: f64,
    /// Fraction of the surface population inside a surface camera's view.
    pub surface_fov_area_fraction: f64,
    /// Divides every biological duration (and multiplies rates).
    pub time_compression: f64,
    pub seed: u64,
    /// Mean dwell (hours) in Egg, FirstCleavage, TwoCell, FourToEightCell for
    /// fertilized individuals.
    pub stage_dwell_hours: [f64; 4],
    pub damaged_persistence_hours: f64,
    pub surface_phase_hours: f64,
    pub rearing_hours: f64,
    pub water_column_depth_m: f64,
    pub diameter_um: (f64, f64),
    pub fov_width_um: f64,
    pub image_width_px: u32,
    pub image_height_px: u32,
}

impl Default for TankConfig {
    fn default() -> Self {
        TankConfig {
            volume_liters: 500.0,
            stocking_density_per_ml: 1.0,
            fertilized_fraction: 0.9,
            damage_rate_per_hour: 0.01,
            dissolution_chain_factor: 0.0,
            fov_volume_fraction: 5e-4,
            surface_fov_area_fraction: 2e-4,
            time_compression: 1.0,
            seed: 0,
            stage_dwell_hours: [1.5, 0.75, 1.0, 2.0],
            damaged_persistence_hours: 6.0,
            surface_phase_hours: 12.0,
            rearing_hours: 156.0,
            water_column_depth_m: 1.0,
            diameter_um: (150.0, 500.0),
            fov_width_um: 6000.0,
            image_width_px: 1920,
            image_height_px: 1080,
        }
    }
}

impl TankConfig {
    /// Collects every violated constraint, one message per field.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        check(self.volume_liters > 0.0, "volume_liters must be > 0");
        check(
            self.stocking_density_per_ml > 0.0,
            "stocking_density_per_ml must be > 0",
        );
        check(
            (0.0..=1.0).contains(&self.fertilized_fraction),
            "fertilized_fraction must be in [0, 1]",
        );
        check(self.damage_rate_per_hour >= 0.0, "damage_rate_per_hour must be >= 0");
        check(
            self.dissolution_chain_factor >= 0.0,
            "dissolution_chain_factor must be >= 0",
        );
        check(
            self.fov_volume_fraction > 0.0 && self.fov_volume_fraction <= 1.0,
            "fov_volume_fraction must be in (0, 1]",
        );
        check(
            self.surface_fov_area_fraction > 0.0 && self.surface_fov_area_fraction <= 1.0,
            "surface_fov_area_fraction must be in (0, 1]",
        );
        check(self.time_compression >= 1.0, "time_compression must be >= 1");
        check(
            self.stage_dwell_hours.iter().all(|h| *h > 0.0),
            "stage_dwell_hours must all be > 0",
        );
        check(
            self.damaged_persistence_hours >= 0.0,
            "damaged_persistence_hours must be >= 0",
        );
        check(self.surface_phase_hours > 0.0, "surface_phase_hours must be > 0");
        check(
            self.rearing_hours > self.surface_phase_hours,
            "rearing_hours must exceed surface_phase_hours",
        );
        check(self.water_column_depth_m > 0.0, "water_column_depth_m must be > 0");
        check(
            self.diameter_um.0 > 0.0 && self.diameter_um.0 <= self.diameter_um.1,
            "diameter_um must satisfy 0 < min <= max",
        );
        check(self.fov_width_um > 0.0, "fov_width_um must be > 0");
        check(
            self.image_width_px > 0 && self.image_height_px > 0,
            "image dimensions must be positive",
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn population(&self) -> u64 {
        (self.volume_liters * 1000.0 * self.stocking_density_per_ml).round() as u64
    }

    /// Timeline in simulated seconds after compression.
    pub fn timeline(&self) -> PhaseTimeline {
        PhaseTimeline {
            t0: 0.0,
            t1: self.surface_phase_hours * HOUR / self.time_compression,
            t2: self.rearing_hours * HOUR / self.time_compression,
        }
    }

    fn dwell_seconds(&self, stage: StageLabel) -> Option<f64> {
        let i = match stage {
            StageLabel::Egg => 0,
            StageLabel::FirstCleavage => 1,
            StageLabel::TwoCell => 2,
            StageLabel::FourToEightCell => 3,
            _ => return None,
        };
        Some(self.stage_dwell_hours[i] * HOUR / self.time_compression)
    }

    fn fov_height_um(&self) -> f64 {
        self.fov_width_um * self.image_height_px as f64 / self.image_width_px as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnIndividual {
    pub id: u32,
    pub stage: StageLabel,
    pub fertilized: bool,
    /// Meters below the surface.
    pub depth: f64,
    pub stage_entry_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Advance,
    Remove,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    id: u32,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Set of ids with O(1) insert, remove and uniform indexing.
#[derive(Debug, Clone, Default)]
struct IdPool {
    ids: Vec<u32>,
    pos: Vec<u32>,
}

impl IdPool {
    const ABSENT: u32 = u32::MAX;

    fn with_capacity(n: usize) -> Self {
        IdPool {
            ids: Vec::with_capacity(n),
            pos: vec![Self::ABSENT; n],
        }
    }

    fn insert(&mut self, id: u32) {
        debug_assert_eq!(self.pos[id as usize], Self::ABSENT);
        self.pos[id as usize] = self.ids.len() as u32;
        self.ids.push(id);
    }

    fn remove(&mut self, id: u32) {
        let p = self.pos[id as usize];
        if p == Self::ABSENT {
            return;
        }
        let last = *self.ids.last().expect("non-empty pool");
        self.ids.swap_remove(p as usize);
        if last != id {
            self.pos[last as usize] = p;
        }
        self.pos[id as usize] = Self::ABSENT;
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// What happened during one `step`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStats {
    pub advanced: u64,
    pub dissolved: u64,
    pub removed: u64,
}

#[derive(Debug, Clone)]
pub struct TankState {
    config: TankConfig,
    timeline: PhaseTimeline,
    time: f64,
    mode: OperationalMode,
    individuals: Vec<SpawnIndividual>,
    live: IdPool,
    unfertilized_eggs: IdPool,
    counts: StageCounts,
    events: BinaryHeap<Event>,
    event_seq: u64,
    /// Effective dissolution rate per simulated second.
    damage_rate: f64,
    dissolutions: u64,
    removed_total: u64,
    rng: ChaCha8Rng,
}

/// Depth interval (meters) that the sub-surface camera renders sharply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocusBand {
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for FocusBand {
    fn default() -> Self {
        FocusBand {
            depth_min: 0.1,
            depth_max: 0.2,
        }
    }
}

impl FocusBand {
    pub fn new(depth_min: f64, depth_max: f64) -> Result<Self> {
        if depth_min <= depth_max && depth_min >= 0.0 {
            Ok(FocusBand { depth_min, depth_max })
        } else {
            Err(Error::InvalidArgument(format!(
                "focus band ({depth_min}, {depth_max}) is not well-ordered"
            )))
        }
    }

    pub fn contains(&self, depth: f64) -> bool {
        depth >= self.depth_min && depth <= self.depth_max
    }
}

/// Ground truth for one captured frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame_id: u64,
    pub time: f64,
    pub mode: OperationalMode,
    pub boxes: Vec<GroundTruthBox>,
    /// Visible but out-of-focus individuals (sub-surface only). Not annotated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blurred: Vec<BoundingBox>,
    pub visible_count: u64,
    /// Visible and sharp. At the surface every visible individual is in the focal plane.
    pub in_focus_count: u64,
    pub tank_population: u64,
    /// Whole-tank stage census at capture time.
    pub tank_counts: StageCounts,
}

impl TankState {
    pub fn new(config: TankConfig) -> Result<Self> {
        config.validate()?;
        let n = config.population();
        if n > u32::MAX as u64 - 1 {
            return Err(Error::InvalidConfig(vec![format!(
                "population {n} exceeds simulator capacity"
            )]));
        }
        let n = n as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut state = TankState {
            timeline: config.timeline(),
            time: 0.0,
            mode: OperationalMode::Surface,
            individuals: Vec::with_capacity(n),
            live: IdPool::with_capacity(n),
            unfertilized_eggs: IdPool::with_capacity(n),
            counts: StageCounts::default(),
            events: BinaryHeap::new(),
            event_seq: 0,
            damage_rate: config.damage_rate_per_hour * config.time_compression / HOUR,
            dissolutions: 0,
            removed_total: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            config,
        };
        for id in 0..n as u32 {
            let fertilized = rng.random::<f64>() < state.config.fertilized_fraction;
            state.individuals.push(SpawnIndividual {
                id,
                stage: StageLabel::Egg,
                fertilized,
                depth: 0.0,
                stage_entry_time: 0.0,
            });
            state.live.insert(id);
            if fertilized {
                let due = sample_dwell(&state.config, &mut rng, StageLabel::Egg);
                state.schedule(due, id, EventKind::Advance);
            } else {
                state.unfertilized_eggs.insert(id);
            }
        }
        state.counts.eggs = n as u64;
        state.rng = rng;
        Ok(state)
    }

    fn schedule(&mut self, time: f64, id: u32, kind: EventKind) {
        self.event_seq += 1;
        self.events.push(Event {
            time,
            seq: self.event_seq,
            id,
            kind,
        });
    }

    fn set_stage(&mut self, id: u32, stage: StageLabel, at: f64) {
        let ind = &mut self.individuals[id as usize];
        let old = ind.stage;
        ind.stage = stage;
        ind.stage_entry_time = at;
        decrement(&mut self.counts, old);
        self.counts.add(stage, 1).expect("surface stage");
    }

    /// Advances the clock by `dt` seconds.
    pub fn step(&mut self, dt: f64) -> Result<StepStats> {
        if !(dt >= 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("step dt must be >= 0, got {dt}")));
        }
        let mut stats = StepStats::default();
        if dt == 0.0 {
            return Ok(stats);
        }
        let t_end = self.time + dt;

        while self.events.peek().is_some_and(|e| e.time <= t_end) {
            let ev = self.events.pop().expect("peeked");
            match ev.kind {
                EventKind::Advance => {
                    let stage = self.individuals[ev.id as usize].stage;
                    let next = match stage {
                        StageLabel::Egg => StageLabel::FirstCleavage,
                        StageLabel::FirstCleavage => StageLabel::TwoCell,
                        StageLabel::TwoCell => StageLabel::FourToEightCell,
                        StageLabel::FourToEightCell => StageLabel::Advanced,
                        _ => continue,
                    };
                    self.set_stage(ev.id, next, ev.time);
                    stats.advanced += 1;
                    if next != StageLabel::Advanced {
                        let due = ev.time + sample_dwell(&self.config, &mut self.rng, next);
                        self.schedule(due, ev.id, EventKind::Advance);
                    }
                }
                EventKind::Remove => {
                    decrement(&mut self.counts, self.individuals[ev.id as usize].stage);
                    self.live.remove(ev.id);
                    self.removed_total += 1;
                    stats.removed += 1;
                }
            }
        }

        let pool = self.unfertilized_eggs.len() as u64;
        if pool > 0 && self.damage_rate > 0.0 {
            let p = -(-self.damage_rate * dt).exp_m1();
            let k = Binomial::new(pool, p.clamp(0.0, 1.0))
                .expect("valid binomial")
                .sample(&mut self.rng);
            let persistence = self.config.damaged_persistence_hours * HOUR / self.config.time_compression;
            for _ in 0..k {
                let j = self.rng.random_range(0..self.unfertilized_eggs.len());
                let id = self.unfertilized_eggs.ids[j];
                self.unfertilized_eggs.remove(id);
                self.set_stage(id, StageLabel::Damaged, t_end);
                self.schedule(t_end + persistence, id, EventKind::Remove);
            }
            stats.dissolved = k;
            self.dissolutions += k;
            if k > 0 && self.config.dissolution_chain_factor > 0.0 {
                self.damage_rate *= (1.0 + self.config.dissolution_chain_factor).powf(k as f64);
            }
        }

        if self.mode == OperationalMode::Surface && t_end >= self.timeline.t1 {
            self.mode = OperationalMode::SubSurface;
            let depth = self.config.water_column_depth_m;
            for &id in &self.live.ids {
                self.individuals[id as usize].depth = self.rng.random::<f64>() * depth;
            }
        }
        self.time = t_end;
        Ok(stats)
    }

    /// Steps in increments of at most `dt` until the clock reaches `until`.
    pub fn advance_to(&mut self, until: f64, dt: f64) -> Result<StepStats> {
        let mut total = StepStats::default();
        while self.time < until {
            let s = self.step(dt.min(until - self.time))?;
            total.advanced += s.advanced;
            total.dissolved += s.dissolved;
            total.removed += s.removed;
        }
        Ok(total)
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn mode(&self) -> OperationalMode {
        self.mode
    }

    pub fn timeline(&self) -> PhaseTimeline {
        self.timeline
    }

    pub fn config(&self) -> &TankConfig {
        &self.config
    }

    pub fn population(&self) -> u64 {
        self.live.len() as u64
    }

    pub fn counts(&self) -> StageCounts {
        self.counts
    }

    pub fn dissolutions(&self) -> u64 {
        self.dissolutions
    }

    pub fn removed_total(&self) -> u64 {
        self.removed_total
    }

    /// Currently live individuals, in pool order.
    pub fn individuals(&self) -> impl Iterator<Item = &SpawnIndividual> {
        self.live.ids.iter().map(|&id| &self.individuals[id as usize])
    }

    /// A manual count as taken at the bench: `samples` aliquots of
    /// `sample_ml` each, scaled up to the tank volume.
    pub fn sample_manual_count<R: Rng>(&self, samples: usize, sample_ml: f64, rng: &mut R) -> Result<ManualCount> {
        if samples == 0 || !(sample_ml > 0.0) {
            return Err(Error::InvalidArgument(
                "manual count needs at least one sample of positive volume".into(),
            ));
        }
        let volume_ml = self.config.volume_liters * 1000.0;
        let p = (sample_ml / volume_ml).min(1.0);
        let n = self.population();
        let binomial = Binomial::new(n, p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let seen: u64 = (0..samples).map(|_| binomial.sample(rng)).sum();
        let per_ml = seen as f64 / (samples as f64 * sample_ml);
        Ok(ManualCount {
            time: self.time,
            tank_total: (per_ml * volume_ml).round() as u64,
            method: format!("{samples} x {sample_ml} mL samples"),
        })
    }

    /// Observes the tank through one camera. Randomness comes from `rng`, so
    /// the tank itself is not perturbed by capturing.
    pub fn capture_frame<R: Rng>(&self, frame_id: u64, focus: FocusBand, rng: &mut R) -> FrameTruth {
        let n = self.live.len();
        let fraction = match self.mode {
            OperationalMode::Surface => self.config.surface_fov_area_fraction,
            OperationalMode::SubSurface => self.config.fov_volume_fraction,
        };
        let k = if fraction >= 1.0 {
            n
        } else {
            Binomial::new(n as u64, fraction).expect("valid binomial").sample(rng) as usize
        };
        let picked = index::sample(rng, n, k);

        let mut boxes = Vec::new();
        let mut blurred = Vec::new();
        let mut in_focus = 0u64;
        for i in picked.iter() {
            let ind = &self.individuals[self.live.ids[i] as usize];
            let label = match self.mode {
                OperationalMode::Surface => ind.stage,
                OperationalMode::SubSurface => StageLabel::CoralInFocus,
            };
            let Some(bbox) = self.place_box(label, rng) else {
                continue;
            };
            match self.mode {
                OperationalMode::Surface => {
                    in_focus += 1;
                    boxes.push(GroundTruthBox { bbox, label });
                }
                OperationalMode::SubSurface if focus.contains(ind.depth) => {
                    in_focus += 1;
                    boxes.push(GroundTruthBox { bbox, label });
                }
                OperationalMode::SubSurface => blurred.push(bbox),
            }
        }
        FrameTruth {
            frame_id,
            time: self.time,
            mode: self.mode,
            boxes,
            blurred,
            visible_count: k as u64,
            in_focus_count: in_focus,
            tank_population: n as u64,
            tank_counts: self.counts,
        }
    }

    fn place_box<R: Rng>(&self, label: StageLabel, rng: &mut R) -> Option<BoundingBox> {
        let (dmin, dmax) = self.config.diameter_um;
        let d = if dmax > dmin {
            rng.random_range(dmin..=dmax)
        } else {
            dmin
        };
        let (w_um, h_um) = footprint_um(label, d, rng.random::<bool>());
        let w = (w_um / self.config.fov_width_um).min(1.0);
        let h = (h_um / self.config.fov_height_um()).min(1.0);
        let cx = w / 2.0 + rng.random::<f64>() * (1.0 - w);
        let cy = h / 2.0 + rng.random::<f64>() * (1.0 - h);
        BoundingBox::from_center_clipped(cx, cy, w, h)
    }
}

/// Extent (width, height) in micrometres of the drawn morphology for an
/// individual of diameter `d`. The renderer derives its geometry from the
/// same proportions.
pub fn footprint_um(label: StageLabel, d: f64, horizontal: bool) -> (f64, f64) {
    let (long, short) = match label {
        StageLabel::Egg | StageLabel::FourToEightCell | StageLabel::Advanced => (d, d),
        StageLabel::FirstCleavage => (1.2 * d, d),
        StageLabel::TwoCell => (1.95 * d, d),
        StageLabel::Damaged => (1.8 * d, 0.6 * d),
        StageLabel::CoralInFocus => (1.5 * d, d),
    };
    if horizontal {
        (long, short)
    } else {
        (short, long)
    }
}

fn sample_dwell(config: &TankConfig, rng: &mut ChaCha8Rng, stage: StageLabel) -> f64 {
    let mean = config.dwell_seconds(stage).expect("non-absorbing stage");
    Exp::new(1.0 / mean).expect("positive rate").sample(rng)
}

fn decrement(counts: &mut StageCounts, stage: StageLabel) {
    let slot = match stage {
        StageLabel::Egg => &mut counts.eggs,
        StageLabel::FirstCleavage => &mut counts.first_cleavage,
        StageLabel::TwoCell => &mut counts.two_cell,
        StageLabel::FourToEightCell => &mut counts.four_eight_cell,
        StageLabel::Advanced => &mut counts.advanced,
        StageLabel::Damaged => &mut counts.damaged,
        StageLabel::CoralInFocus => return,
    };
    *slot -= 1;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p: f64, seed: u64) -> TankConfig {
        TankConfig {
            volume_liters: 2.0,
            fertilized_fraction: p,
            seed,
            ..TankConfig::default()
        }
    }

    #[test]
    fn default_stocking_is_half_a_million_eggs() {
        let cfg = TankConfig::default();
        assert_eq!(cfg.population(), 500_000);
        let tank = TankState::new(cfg).unwrap();
        assert_eq!(tank.population(), 500_000);
        assert_eq!(tank.counts().eggs, 500_000);
        assert_eq!(tank.mode(), OperationalMode::Surface);
        assert!(tank.individuals().all(|i| i.depth == 0.0 && i.stage == StageLabel::Egg));
    }

    #[test]
    fn invalid_config_names_each_field() {
        let cfg = TankConfig {
            volume_liters: 0.0,
            fertilized_fraction: 1.5,
            ..TankConfig::default()
        };
        match TankState::new(cfg) {
            Err(Error::InvalidConfig(errs)) => {
                assert_eq!(errs.len(), 2);
                assert!(errs[0].contains("volume_liters"));
                assert!(errs[1].contains("fertilized_fraction"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_state() {
        let mut a = TankState::new(small(0.5, 3)).unwrap();
        let mut b = TankState::new(small(0.5, 3)).unwrap();
        a.advance_to(3.0 * HOUR, 10.0).unwrap();
        b.advance_to(3.0 * HOUR, 10.0).unwrap();
        assert_eq!(a.counts(), b.counts());
        let ia: Vec<_> = a.individuals().copied().collect();
        let ib: Vec<_> = b.individuals().copied().collect();
        assert_eq!(ia, ib);
    }

    #[test]
    fn zero_dt_is_identity() {
        let mut t = TankState::new(small(0.5, 1)).unwrap();
        t.advance_to(HOUR, 10.0).unwrap();
        let before: Vec<_> = t.individuals().copied().collect();
        let s = t.step(0.0).unwrap();
        assert_eq!(s, StepStats::default());
        assert_eq!(before, t.individuals().copied().collect::<Vec<_>>());
        assert!(t.step(-1.0).is_err());
    }

    #[test]
    fn unfertilized_never_cleave() {
        let cfg = TankConfig {
            damage_rate_per_hour: 0.5,
            ..small(0.0, 2)
        };
        let mut t = TankState::new(cfg).unwrap();
        for _ in 0..100 {
            t.step(360.0).unwrap();
            let c = t.counts();
            assert_eq!(c.fertilized(), 0);
        }
        assert!(t.dissolutions() > 0);
    }

    #[test]
    fn fully_fertilized_reaches_advanced() {
        let cfg = TankConfig {
            damage_rate_per_hour: 0.0,
            ..small(1.0, 4)
        };
        let mut t = TankState::new(cfg).unwrap();
        t.advance_to(200.0 * HOUR, 600.0).unwrap();
        assert_eq!(t.counts().advanced, t.population());
        assert_eq!(t.population(), 2000);
    }

    #[test]
    fn population_conservation() {
        let cfg = TankConfig {
            damage_rate_per_hour: 0.3,
            damaged_persistence_hours: 0.5,
            dissolution_chain_factor: 0.001,
            ..small(0.4, 9)
        };
        let mut t = TankState::new(cfg).unwrap();
        let mut prev = t.population();
        for _ in 0..400 {
            let s = t.step(60.0).unwrap();
            assert_eq!(prev - s.removed, t.population());
            assert_eq!(t.counts().total(), t.population());
            prev = t.population();
        }
        assert!(t.removed_total() > 0);
    }

    #[test]
    fn mode_switch_disperses_once() {
        let cfg = TankConfig {
            surface_phase_hours: 1.0,
            rearing_hours: 3.0,
            ..small(0.9, 5)
        };
        let mut t = TankState::new(cfg).unwrap();
        let mut modes = Vec::new();
        for _ in 0..(3 * 360) {
            t.step(10.0).unwrap();
            modes.push(t.mode());
        }
        assert!(modes.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(t.mode(), OperationalMode::SubSurface);
        let depth = t.config().water_column_depth_m;
        assert!(t.individuals().all(|i| i.depth >= 0.0 && i.depth <= depth));
        assert!(t.individuals().any(|i| i.depth > 0.0));
    }

    #[test]
    fn full_view_sees_everyone() {
        let cfg = TankConfig {
            fov_volume_fraction: 1.0,
            surface_phase_hours: 0.01,
            ..small(0.9, 6)
        };
        let mut t = TankState::new(cfg).unwrap();
        t.step(60.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = t.capture_frame(0, FocusBand::new(0.0, 10.0).unwrap(), &mut rng);
        assert_eq!(f.visible_count, t.population());
        assert_eq!(f.in_focus_count, f.visible_count);
        assert!(f.boxes.iter().all(|b| b.label == StageLabel::CoralInFocus));
    }

    #[test]
    fn surface_frames_use_surface_taxonomy() {
        let cfg = TankConfig {
            surface_fov_area_fraction: 0.05,
            ..small(0.9, 7)
        };
        let mut t = TankState::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..20 {
            t.step(600.0).unwrap();
            let f = t.capture_frame(i, FocusBand::default(), &mut rng);
            assert_eq!(f.mode, OperationalMode::Surface);
            assert!(f.boxes.iter().all(|b| b.label != StageLabel::CoralInFocus));
            assert!(f.boxes.iter().all(|b| b.bbox.is_valid()));
            assert!(f.in_focus_count <= f.visible_count && f.visible_count <= f.tank_population);
        }
    }

    #[test]
    fn out_of_focus_are_counted_not_boxed() {
        let cfg = TankConfig {
            fov_volume_fraction: 0.2,
            surface_phase_hours: 0.01,
            ..small(0.9, 8)
        };
        let mut t = TankState::new(cfg).unwrap();
        t.step(60.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = t.capture_frame(0, FocusBand::new(0.0, 0.3).unwrap(), &mut rng);
        assert_eq!(f.boxes.len() as u64, f.in_focus_count);
        assert_eq!(f.blurred.len() as u64, f.visible_count - f.in_focus_count);
        assert!(f.in_focus_count < f.visible_count);
    }

    #[test]
    fn focus_band_must_be_ordered() {
        assert!(FocusBand::new(0.3, 0.1).is_err());
        assert!(FocusBand::new(0.1, 0.1).is_ok());
    }
}
