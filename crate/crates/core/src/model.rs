//! Domain vocabulary shared by every other module: the developmental-stage
//! taxonomy, normalized box geometry, per-image stage counts and the
//! operational timeline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Developmental stage of a single spawn individual.
///
/// The first six values form the surface (multi-class) taxonomy. `CoralInFocus`
/// is the single class of the sub-surface taxonomy. Declaration order is the
/// class index used in label files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLabel {
    Egg,
    FirstCleavage,
    TwoCell,
    #[serde(rename = "four_eight_cell")]
    FourToEightCell,
    Advanced,
    Damaged,
    #[serde(rename = "coral")]
    CoralInFocus,
}

impl StageLabel {
    pub const ALL: [StageLabel; 7] = [
        StageLabel::Egg,
        StageLabel::FirstCleavage,
        StageLabel::TwoCell,
        StageLabel::FourToEightCell,
        StageLabel::Advanced,
        StageLabel::Damaged,
        StageLabel::CoralInFocus,
    ];

    pub const SURFACE: [StageLabel; 6] = [
        StageLabel::Egg,
        StageLabel::FirstCleavage,
        StageLabel::TwoCell,
        StageLabel::FourToEightCell,
        StageLabel::Advanced,
        StageLabel::Damaged,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<StageLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageLabel::Egg => "egg",
            StageLabel::FirstCleavage => "first_cleavage",
            StageLabel::TwoCell => "two_cell",
            StageLabel::FourToEightCell => "four_eight_cell",
            StageLabel::Advanced => "advanced",
            StageLabel::Damaged => "damaged",
            StageLabel::CoralInFocus => "coral",
        }
    }

    pub fn parse(s: &str) -> Option<StageLabel> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }

    /// The operational mode whose taxonomy contains this label.
    pub fn mode(self) -> OperationalMode {
        match self {
            StageLabel::CoralInFocus => OperationalMode::SubSurface,
            _ => OperationalMode::Surface,
        }
    }

    /// Position within the mode's own taxonomy (0..6 for surface, 0 for sub-surface).
    pub fn taxonomy_index(self) -> usize {
        match self {
            StageLabel::CoralInFocus => 0,
            other => other.index(),
        }
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Camera operational mode. A run only ever moves from `Surface` to `SubSurface`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationalMode {
    Surface,
    #[serde(rename = "subsurface")]
    SubSurface,
}

impl OperationalMode {
    pub fn labels(self) -> &'static [StageLabel] {
        match self {
            OperationalMode::Surface => &StageLabel::SURFACE,
            OperationalMode::SubSurface => &[StageLabel::CoralInFocus],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OperationalMode::Surface => "surface",
            OperationalMode::SubSurface => "subsurface",
        }
    }

    pub fn parse(s: &str) -> Option<OperationalMode> {
        match s {
            "surface" => Some(OperationalMode::Surface),
            "subsurface" | "sub-surface" | "sub_surface" => Some(OperationalMode::SubSurface),
            _ => None,
        }
    }

    /// Whether moving from `self` to `next` respects mode monotonicity.
    pub fn can_transition_to(self, next: OperationalMode) -> bool {
        self <= next
    }
}

impl fmt::Display for OperationalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        }
    }

    /// Builds a box from center and size, clipping to the unit square.
    /// Returns `None` when nothing of positive area remains.
    pub fn from_center_clipped(cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        let b = BoundingBox {
            x_min: (cx - w / 2.0).max(0.0),
            y_min: (cy - h / 2.0).max(0.0),
            x_max: (cx + w / 2.0).min(1.0),
            y_max: (cy + h / 2.0).min(1.0),
        };
        b.is_valid().then_some(b)
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x_min)
            && in_unit(self.y_min)
            && in_unit(self.x_max)
            && in_unit(self.y_max)
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: StageLabel,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: StageLabel,
}

impl From<&Detection> for GroundTruthBox {
    fn from(d: &Detection) -> Self {
        GroundTruthBox {
            bbox: d.bbox,
            label: d.label,
        }
    }
}

/// Per-image counts per developmental stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageCounts {
    pub eggs: u64,
    pub first_cleavage: u64,
    pub two_cell: u64,
    pub four_eight_cell: u64,
    pub advanced: u64,
    pub damaged: u64,
}

impl StageCounts {
    pub fn get(&self, label: StageLabel) -> u64 {
        match label {
            StageLabel::Egg => self.eggs,
            StageLabel::FirstCleavage => self.first_cleavage,
            StageLabel::TwoCell => self.two_cell,
            StageLabel::FourToEightCell => self.four_eight_cell,
            StageLabel::Advanced => self.advanced,
            StageLabel::Damaged => self.damaged,
            StageLabel::CoralInFocus => 0,
        }
    }

    fn slot(&mut self, label: StageLabel) -> Result<&mut u64> {
        Ok(match label {
            StageLabel::Egg => &mut self.eggs,
            StageLabel::FirstCleavage => &mut self.first_cleavage,
            StageLabel::TwoCell => &mut self.two_cell,
            StageLabel::FourToEightCell => &mut self.four_eight_cell,
            StageLabel::Advanced => &mut self.advanced,
            StageLabel::Damaged => &mut self.damaged,
            StageLabel::CoralInFocus => return Err(Error::WrongTaxonomy(label)),
        })
    }

    pub fn add(&mut self, label: StageLabel, n: u64) -> Result<()> {
        *self.slot(label)? += n;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.viable() + self.damaged
    }

    /// Eggs plus all fertilized stages; damaged is nonviable.
    pub fn viable(&self) -> u64 {
        self.eggs + self.fertilized()
    }

    pub fn fertilized(&self) -> u64 {
        self.first_cleavage + self.two_cell + self.four_eight_cell + self.advanced
    }

    pub fn merged(&self, other: &StageCounts) -> StageCounts {
        StageCounts {
            eggs: self.eggs + other.eggs,
            first_cleavage: self.first_cleavage + other.first_cleavage,
            two_cell: self.two_cell + other.two_cell,
            four_eight_cell: self.four_eight_cell + other.four_eight_cell,
            advanced: self.advanced + other.advanced,
            damaged: self.damaged + other.damaged,
        }
    }
}

/// Operational timeline in seconds since run start: surface phase `[t0, t1)`,
/// sub-surface phase `[t1, t2)`, harvest at `t2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimeline {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
}

impl PhaseTimeline {
    pub fn new(t0: f64, t1: f64, t2: f64) -> Result<Self> {
        if t0 < t1 && t1 < t2 {
            Ok(PhaseTimeline { t0, t1, t2 })
        } else {
            Err(Error::InvalidArgument(format!(
                "timeline must satisfy t0 < t1 < t2, got {t0}, {t1}, {t2}"
            )))
        }
    }

    pub fn mode_at(&self, t: f64) -> OperationalMode {
        if t < self.t1 {
            OperationalMode::Surface
        } else {
            OperationalMode::SubSurface
        }
    }
}

/// Whether a surface-taxonomy label denotes a fertilized (cleaving or later) individual.
pub fn stage_is_fertilized(label: StageLabel) -> Result<bool> {
    match label {
        StageLabel::FirstCleavage | StageLabel::TwoCell | StageLabel::FourToEightCell | StageLabel::Advanced => {
            Ok(true)
        }
        StageLabel::Egg | StageLabel::Damaged => Ok(false),
        StageLabel::CoralInFocus => Err(Error::WrongTaxonomy(label)),
    }
}

pub fn counts_from_labels<I>(labels: I) -> Result<StageCounts>
where
    I: IntoIterator<Item = StageLabel>,
{
    let mut counts = StageCounts::default();
    for label in labels {
        counts.add(label, 1).map_err(|_| Error::MixedTaxonomy)?;
    }
    Ok(counts)
}

/// Checks that all labels come from one taxonomy and returns its mode
/// (`None` for an empty set).
pub fn taxonomy_of<I>(labels: I) -> Result<Option<OperationalMode>>
where
    I: IntoIterator<Item = StageLabel>,
{
    let mut mode = None;
    for label in labels {
        match mode {
            None => mode = Some(label.mode()),
            Some(m) if m != label.mode() => return Err(Error::MixedTaxonomy),
            Some(_) => {}
        }
    }
    Ok(mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fertilized_partition() {
        assert!(stage_is_fertilized(StageLabel::FirstCleavage).unwrap());
        assert!(!stage_is_fertilized(StageLabel::Egg).unwrap());
        assert!(matches!(
            stage_is_fertilized(StageLabel::CoralInFocus),
            Err(Error::WrongTaxonomy(_))
        ));
        let fert = StageLabel::SURFACE
            .iter()
            .filter(|l| stage_is_fertilized(**l).unwrap())
            .count();
        assert_eq!(fert, 4);
    }

    #[test]
    fn counts_examples() {
        assert_eq!(counts_from_labels([]).unwrap(), StageCounts::default());
        let c = counts_from_labels([StageLabel::Egg, StageLabel::Egg, StageLabel::TwoCell]).unwrap();
        assert_eq!(c.eggs, 2);
        assert_eq!(c.two_cell, 1);
        assert_eq!(c.total(), 3);
        assert!(matches!(
            counts_from_labels([StageLabel::Egg, StageLabel::CoralInFocus]),
            Err(Error::MixedTaxonomy)
        ));
    }

    #[test]
    fn label_wire_names() {
        let names: Vec<String> = StageLabel::ALL
            .iter()
            .map(|l| serde_json::to_string(l).unwrap())
            .collect();
        assert_eq!(
            names,
            [
                "\"egg\"",
                "\"first_cleavage\"",
                "\"two_cell\"",
                "\"four_eight_cell\"",
                "\"advanced\"",
                "\"damaged\"",
                "\"coral\""
            ]
        );
        for l in StageLabel::ALL {
            assert_eq!(StageLabel::parse(l.as_str()), Some(l));
            assert_eq!(StageLabel::from_index(l.index()), Some(l));
        }
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
        assert!(BoundingBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BoundingBox::new(-0.1, 0.0, 0.5, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(BoundingBox::from_center_clipped(1.2, 0.5, 0.1, 0.1).is_none());
        let b = BoundingBox::from_center_clipped(0.99, 0.5, 0.1, 0.1).unwrap();
        assert_eq!(b.x_max, 1.0);
    }

    #[test]
    fn mode_monotonicity() {
        assert!(OperationalMode::Surface.can_transition_to(OperationalMode::SubSurface));
        assert!(OperationalMode::SubSurface.can_transition_to(OperationalMode::SubSurface));
        assert!(!OperationalMode::SubSurface.can_transition_to(OperationalMode::Surface));
        let t = PhaseTimeline::new(0.0, 10.0, 20.0).unwrap();
        assert_eq!(t.mode_at(9.9), OperationalMode::Surface);
        assert_eq!(t.mode_at(10.0), OperationalMode::SubSurface);
        assert!(PhaseTimeline::new(0.0, 10.0, 10.0).is_err());
    }

    fn surface_label() -> impl Strategy<Value = StageLabel> {
        (0usize..6).prop_map(|i| StageLabel::SURFACE[i])
    }

    proptest! {
        #[test]
        fn counts_are_permutation_invariant(
            labels in proptest::collection::vec(surface_label(), 0..64),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let counts = counts_from_labels(labels.iter().copied()).unwrap();
            prop_assert_eq!(counts.total() as usize, labels.len());
            for l in StageLabel::SURFACE {
                let m = labels.iter().filter(|x| **x == l).count() as u64;
                prop_assert_eq!(counts.get(l), m);
            }
            let mut shuffled = labels.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(counts_from_labels(shuffled).unwrap(), counts);
        }
    }
}
