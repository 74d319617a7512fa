//! Annotation bookkeeping: bootstrap and pseudo-label rounds, the review
//! queue with its audit trail, dataset splits, and normalized label files.
//!
//! Label files hold one line per box:
//!
//! ```text
//! <class_index> <x_center> <y_center> <width> <height>
//! ```
//!
//! with coordinates normalized to `[0, 1]` and class indices in
//! [`StageLabel`] declaration order. Numbers are written in the shortest
//! form that parses back to the same `f64`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{Detector, FrameInput};
use crate::error::{Error, Result};
use crate::model::{BoundingBox, GroundTruthBox, StageLabel};
use crate::store::{RecordEnvelope, RecordType};

pub const DEFAULT_BOOTSTRAP: usize = 100;
pub const DEFAULT_BATCH: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundSource {
    Manual,
    PseudoLabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRound {
    pub round_index: usize,
    pub source: RoundSource,
    pub image_ids: Vec<u64>,
    pub review_status: BTreeMap<u64, ReviewStatus>,
}

impl AnnotationRound {
    fn new(round_index: usize, image_ids: Vec<u64>) -> Self {
        let source = if round_index == 0 {
            RoundSource::Manual
        } else {
            RoundSource::PseudoLabeled
        };
        let review_status = image_ids.iter().map(|id| (*id, ReviewStatus::Pending)).collect();
        AnnotationRound {
            round_index,
            source,
            image_ids,
            review_status,
        }
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// A round is closed once no image is pending.
    pub fn is_closed(&self) -> bool {
        self.review_status.values().all(|s| *s != ReviewStatus::Pending)
    }
}

/// Splits `total_images` (ids `0..total_images`) into a manual bootstrap
/// round followed by pseudo-labeled batches; the last batch is truncated.
pub fn plan_rounds(total_images: usize, bootstrap: usize, batch: usize) -> Result<Vec<AnnotationRound>> {
    if bootstrap == 0 || batch == 0 {
        return Err(Error::InvalidArgument("round sizes must be positive".into()));
    }
    if total_images < bootstrap {
        return Err(Error::InvalidArgument(format!(
            "{total_images} images cannot fill a bootstrap round of {bootstrap}"
        )));
    }
    let mut rounds = vec![AnnotationRound::new(0, (0..bootstrap as u64).collect())];
    let mut next = bootstrap;
    while next < total_images {
        let end = (next + batch).min(total_images);
        rounds.push(AnnotationRound::new(rounds.len(), (next as u64..end as u64).collect()));
        next = end;
    }
    Ok(rounds)
}

/// Box in label-file form: class plus normalized center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelBox {
    pub label: StageLabel,
    pub x_center: f64,
    pub y_center: f64,
    pub width: f64,
    pub height: f64,
}

impl LabelBox {
    pub fn from_truth(gt: &GroundTruthBox) -> Self {
        let (x_center, y_center) = gt.bbox.center();
        LabelBox {
            label: gt.label,
            x_center,
            y_center,
            width: gt.bbox.width(),
            height: gt.bbox.height(),
        }
    }

    /// Corner form; fails when the box leaves the unit square.
    pub fn to_truth(&self) -> Result<GroundTruthBox> {
        self.validate()?;
        let bbox = BoundingBox::new(
            (self.x_center - self.width / 2.0).max(0.0),
            (self.y_center - self.height / 2.0).max(0.0),
            (self.x_center + self.width / 2.0).min(1.0),
            (self.y_center + self.height / 2.0).min(1.0),
        )?;
        Ok(GroundTruthBox {
            bbox,
            label: self.label,
        })
    }

    pub fn validate(&self) -> Result<()> {
        // Corner/center conversions may overshoot the border by rounding.
        const SLACK: f64 = 1e-9;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = unit(self.x_center)
            && unit(self.y_center)
            && self.width > 0.0
            && self.height > 0.0
            && self.width <= 1.0
            && self.height <= 1.0
            && self.x_center - self.width / 2.0 >= -SLACK
            && self.x_center + self.width / 2.0 <= 1.0 + SLACK
            && self.y_center - self.height / 2.0 >= -SLACK
            && self.y_center + self.height / 2.0 <= 1.0 + SLACK;
        if ok {
            Ok(())
        } else {
            Err(Error::Annotation(format!(
                "box ({}, {}, {}, {}) lies outside [0, 1]",
                self.x_center, self.y_center, self.width, self.height
            )))
        }
    }

    pub fn to_line(&self) -> Result<String> {
        self.validate()?;
        Ok(format!(
            "{} {:?} {:?} {:?} {:?}",
            self.label.index(),
            self.x_center,
            self.y_center,
            self.width,
            self.height
        ))
    }
}

pub fn format_label_file(boxes: &[LabelBox]) -> Result<String> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&b.to_line()?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a label file; `path` only feeds error messages.
pub fn parse_label_file(text: &str, path: &Path) -> Result<Vec<LabelBox>> {
    let err = |line: usize, reason: String| Error::LabelFormat {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut boxes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(line_no, format!("expected 5 fields, found {}", fields.len())));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| err(line_no, format!("bad class index {:?}", fields[0])))?;
        let label = StageLabel::from_index(class).ok_or_else(|| err(line_no, format!("unknown class {class}")))?;
        let mut v = [0.0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(line_no, format!("bad number {f:?}")))?;
        }
        let b = LabelBox {
            label,
            x_center: v[0],
            y_center: v[1],
            width: v[2],
            height: v[3],
        };
        b.validate().map_err(|e| err(line_no, e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn label_file_name(image_id: u64) -> String {
    format!("{image_id:06}.txt")
}

/// Writes one label file per image into `dir`. Every box is validated
/// before anything is written.
pub fn export_labels(dir: &Path, images: &BTreeMap<u64, Vec<LabelBox>>) -> Result<Vec<PathBuf>> {
    let rendered: Vec<(u64, String)> = images
        .iter()
        .map(|(id, boxes)| Ok((*id, format_label_file(boxes)?)))
        .collect::<Result<_>>()?;
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    rendered
        .into_iter()
        .map(|(id, text)| {
            let path = dir.join(label_file_name(id));
            fs::write(&path, text).map_err(|e| Error::storage(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Reads every `<id>.txt` label file in `dir`.
pub fn import_labels(dir: &Path) -> Result<BTreeMap<u64, Vec<LabelBox>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::storage(dir, e))? {
        let path = entry.map_err(|e| Error::storage(dir, e))?.path();
        if path.extension().is_none_or(|x| x != "txt") {
            continue;
        }
        let Some(id) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
        out.insert(id, parse_label_file(&text, &path)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

/// Seeded shuffle, then contiguous train/val/test slices. Validation and
/// test sizes are `floor(n * ratio)`; train takes the remainder.
pub fn make_split(image_ids: &[u64], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    if image_ids.is_empty() {
        return Err(Error::Empty("image ids"));
    }
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(*r >= 0.0)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {tr}/{va}/{te} must be non-negative and sum to 1"
        )));
    }
    let unique: BTreeSet<u64> = image_ids.iter().copied().collect();
    if unique.len() != image_ids.len() {
        return Err(Error::InvalidArgument("duplicate image ids".into()));
    }
    let mut ids = image_ids.to_vec();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    // The epsilon keeps exact products such as 2000 * 0.2 from flooring low.
    let take = |r: f64| ((n as f64 * r + 1e-9).floor() as usize).min(n);
    let n_val = take(va);
    let n_test = take(te).min(n - n_val);
    let n_train = n - n_val - n_test;
    Ok(DatasetSplit {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
        ratios,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub label_box: LabelBox,
    pub confidence: f64,
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Corrected { replacement: LabelBox },
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReviewAction {
    Accept {
        proposal: usize,
    },
    Correct {
        proposal: usize,
        replacement: LabelBox,
    },
    Reject {
        proposal: usize,
    },
    Add {
        label_box: LabelBox,
    },
    /// All proposals decided; the image leaves the queue.
    Finish,
}

/// One reviewer action as recorded. Entries are only ever appended, so the
/// original proposal survives every correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub round_index: usize,
    pub image_id: u64,
    #[serde(flatten)]
    pub action: ReviewAction,
    /// The proposal as the detector produced it, for proposal actions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<LabelBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<ReviewStatus>,
}

/// Review state of one round: proposals per image, reviewer additions and
/// the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub round: AnnotationRound,
    pub proposals: BTreeMap<u64, Vec<Proposal>>,
    pub added: BTreeMap<u64, Vec<LabelBox>>,
    audit: Vec<AuditEntry>,
}

impl ReviewSession {
    /// A manual round: nothing proposed, the annotator adds every box.
    pub fn manual(round: AnnotationRound) -> Result<Self> {
        if round.source != RoundSource::Manual {
            return Err(Error::Annotation(format!("round {} is not manual", round.round_index)));
        }
        Ok(Self::empty(round))
    }

    fn empty(round: AnnotationRound) -> Self {
        let proposals = round.image_ids.iter().map(|id| (*id, Vec::new())).collect();
        ReviewSession {
            round,
            proposals,
            added: BTreeMap::new(),
            audit: Vec::new(),
        }
    }

    /// Runs `detector` over the round's frames; detections at or above
    /// `min_confidence` become pending proposals. `frames` must cover every
    /// image in the round.
    pub fn pseudo_label(
        round: AnnotationRound,
        detector: &dyn Detector,
        frames: &BTreeMap<u64, FrameInput<'_>>,
        min_confidence: f64,
    ) -> Result<Self> {
        if round.source != RoundSource::PseudoLabeled {
            return Err(Error::Annotation(format!(
                "round {} is manual and cannot be pseudo-labeled",
                round.round_index
            )));
        }
        let mut session = Self::empty(round);
        for id in session.round.image_ids.clone() {
            let frame = frames.get(&id).ok_or_else(|| {
                Error::Annotation(format!(
                    "round {} blocked: no frame for image {id}",
                    session.round.round_index
                ))
            })?;
            let result = detector.detect(*frame).map_err(|e| {
                Error::Annotation(format!("round {} blocked: image {id}: {e}", session.round.round_index))
            })?;
            let props = result
                .detections
                .iter()
                .filter(|d| d.confidence >= min_confidence)
                .map(|d| Proposal {
                    label_box: LabelBox::from_truth(&GroundTruthBox::from(d)),
                    confidence: d.confidence,
                    decision: None,
                })
                .collect();
            session.proposals.insert(id, props);
        }
        Ok(session)
    }

    pub fn audit_trail(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn status(&self, image_id: u64) -> Option<ReviewStatus> {
        self.round.review_status.get(&image_id).copied()
    }

    pub fn is_closed(&self) -> bool {
        self.round.is_closed()
    }

    /// Applies one reviewer action to `image_id`.
    pub fn act(&mut self, image_id: u64, action: ReviewAction) -> Result<()> {
        let round_index = self.round.round_index;
        match self.status(image_id) {
            None => {
                return Err(Error::Annotation(format!(
                    "image {image_id} is not in round {round_index}"
                )))
            }
            Some(ReviewStatus::Pending) => {}
            Some(s) => return Err(Error::Annotation(format!("image {image_id} already reviewed ({s:?})"))),
        }
        let props = self
            .proposals
            .get_mut(&image_id)
            .expect("every round image has a proposal list");
        let mut original = None;
        let mut status = None;
        match action {
            ReviewAction::Accept { proposal }
            | ReviewAction::Reject { proposal }
            | ReviewAction::Correct { proposal, .. } => {
                let p = props
                    .get_mut(proposal)
                    .ok_or_else(|| Error::Annotation(format!("image {image_id} has no proposal {proposal}")))?;
                if p.decision.is_some() {
                    return Err(Error::Annotation(format!(
                        "proposal {proposal} of image {image_id} already decided"
                    )));
                }
                let decision = match action {
                    ReviewAction::Accept { .. } => Decision::Accepted,
                    ReviewAction::Reject { .. } => Decision::Rejected,
                    ReviewAction::Correct { replacement, .. } => {
                        replacement.validate()?;
                        Decision::Corrected { replacement }
                    }
                    _ => unreachable!(),
                };
                p.decision = Some(decision);
                original = Some(p.label_box);
            }
            ReviewAction::Add { label_box } => {
                label_box.validate()?;
                self.added.entry(image_id).or_default().push(label_box);
            }
            ReviewAction::Finish => {
                if props.iter().any(|p| p.decision.is_none()) {
                    return Err(Error::Annotation(format!(
                        "image {image_id} still has undecided proposals"
                    )));
                }
                let changed = props.iter().any(|p| p.decision != Some(Decision::Accepted))
                    || self.added.get(&image_id).is_some_and(|a| !a.is_empty());
                let s = if changed && self.round.source == RoundSource::PseudoLabeled {
                    ReviewStatus::Corrected
                } else {
                    ReviewStatus::Accepted
                };
                self.round.review_status.insert(image_id, s);
                status = Some(s);
            }
        }
        self.audit.push(AuditEntry {
            seq: self.audit.len() as u64,
            round_index,
            image_id,
            action,
            original,
            status,
        });
        Ok(())
    }

    /// Accepts every pending proposal of an image and finishes it.
    pub fn accept_all(&mut self, image_id: u64) -> Result<()> {
        let n = self.proposals.get(&image_id).map_or(0, Vec::len);
        for i in 0..n {
            if self.proposals[&image_id][i].decision.is_none() {
                self.act(image_id, ReviewAction::Accept { proposal: i })?;
            }
        }
        self.act(image_id, ReviewAction::Finish)
    }

    /// Final labels of a reviewed image: accepted proposals, corrected
    /// replacements and reviewer additions.
    pub fn labels(&self, image_id: u64) -> Vec<LabelBox> {
        let mut out: Vec<LabelBox> = self
            .proposals
            .get(&image_id)
            .into_iter()
            .flatten()
            .filter_map(|p| match p.decision {
                Some(Decision::Accepted) => Some(p.label_box),
                Some(Decision::Corrected { replacement }) => Some(replacement),
                _ => None,
            })
            .collect();
        out.extend(self.added.get(&image_id).into_iter().flatten().copied());
        out
    }

    /// Labels of every reviewed image, ready for [`export_labels`].
    pub fn reviewed_labels(&self) -> BTreeMap<u64, Vec<LabelBox>> {
        self.round
            .review_status
            .iter()
            .filter(|(_, s)| **s != ReviewStatus::Pending)
            .map(|(id, _)| (*id, self.labels(*id)))
            .collect()
    }

    /// The audit trail as `annotation` records.
    pub fn audit_records(&self, timestamp: f64) -> Result<Vec<RecordEnvelope>> {
        self.audit
            .iter()
            .map(|e| Ok(RecordEnvelope::from_payload(RecordType::Annotation, timestamp, e)?.with_source("reviewer")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{DetectorNoise, OracleDetector};
    use crate::model::OperationalMode;
    use crate::simtank::FrameTruth;
    use crate::StageCounts;
    use proptest::prelude::*;

    #[test]
    fn rounds_for_two_thousand() {
        let rounds = plan_rounds(2000, DEFAULT_BOOTSTRAP, DEFAULT_BATCH).unwrap();
        let sizes: Vec<usize> = rounds.iter().map(AnnotationRound::len).collect();
        let mut want = vec![100];
        want.extend([200; 9]);
        want.push(100);
        assert_eq!(sizes, want);
        assert_eq!(sizes.iter().sum::<usize>(), 2000);
        assert_eq!(rounds[0].source, RoundSource::Manual);
        assert!(rounds[1..].iter().all(|r| r.source == RoundSource::PseudoLabeled));
        let all: BTreeSet<u64> = rounds.iter().flat_map(|r| r.image_ids.iter().copied()).collect();
        assert_eq!(all.len(), 2000);

        assert_eq!(plan_rounds(100, 100, 200).unwrap().len(), 1);
        assert!(plan_rounds(99, 100, 200).is_err());
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<u64> = (0..2000).collect();
        let s = make_split(&ids, (0.7, 0.2, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1400, 400, 200));
        let ten: Vec<u64> = (0..10).collect();
        let s = make_split(&ten, (0.7, 0.2, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 1));
        assert_eq!(make_split(&ten, (0.7, 0.2, 0.1), 3).unwrap(), s);
        assert!(make_split(&ten, (0.7, 0.2, 0.2), 3).is_err());
        assert!(make_split(&[], (0.7, 0.2, 0.1), 3).is_err());
    }

    #[test]
    fn label_lines() {
        let full = LabelBox {
            label: StageLabel::TwoCell,
            x_center: 0.5,
            y_center: 0.5,
            width: 1.0,
            height: 1.0,
        };
        assert_eq!(full.to_line().unwrap(), "2 0.5 0.5 1.0 1.0");
        assert_eq!(format_label_file(&[]).unwrap(), "");
        let outside = LabelBox {
            x_center: 0.9,
            width: 0.4,
            ..full
        };
        assert!(outside.to_line().is_err());
        let err = parse_label_file("0 0.5 0.5 0.1\n", Path::new("x.txt")).unwrap_err();
        assert!(matches!(err, Error::LabelFormat { line: 1, .. }));
        assert!(parse_label_file("9 0.5 0.5 0.1 0.1\n", Path::new("x.txt")).is_err());
    }

    fn arb_box() -> impl Strategy<Value = LabelBox> {
        (0usize..7, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_filter_map(
            "inside",
            |(c, x0, y0, a, b)| {
                let (x1, y1) = (x0 + (1.0 - x0) * a, y0 + (1.0 - y0) * b);
                let gt = GroundTruthBox {
                    bbox: BoundingBox::new(x0, y0, x1, y1).ok()?,
                    label: StageLabel::from_index(c)?,
                };
                let lb = LabelBox::from_truth(&gt);
                lb.validate().ok().map(|_| lb)
            },
        )
    }

    proptest! {
        #[test]
        fn split_is_partition(n in 1usize..300, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (va, te) = (a, (1.0 - a) * b);
            let tr = 1.0 - va - te;
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 1).collect();
            let s = make_split(&ids, (tr, va, te), seed).unwrap();
            let mut all: Vec<u64> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, ids);
        }

        #[test]
        fn label_file_round_trip(boxes in proptest::collection::vec(arb_box(), 0..20)) {
            let text = format_label_file(&boxes).unwrap();
            prop_assert_eq!(parse_label_file(&text, Path::new("p.txt")).unwrap(), boxes);
        }
    }

    fn frame(id: u64) -> FrameTruth {
        let b = |x: f64, l| GroundTruthBox {
            bbox: BoundingBox::new(x, 0.2, x + 0.1, 0.3).unwrap(),
            label: l,
        };
        FrameTruth {
            frame_id: id,
            time: id as f64 * 10.0,
            mode: OperationalMode::Surface,
            boxes: vec![b(0.1, StageLabel::Egg), b(0.5, StageLabel::TwoCell)],
            blurred: vec![],
            visible_count: 2,
            in_focus_count: 2,
            tank_population: 100,
            tank_counts: StageCounts::default(),
        }
    }

    fn session(round: AnnotationRound, truths: &[FrameTruth]) -> ReviewSession {
        let det = OracleDetector::new(DetectorNoise::identity(OperationalMode::Surface), 1).unwrap();
        let frames: BTreeMap<u64, FrameInput<'_>> = round
            .image_ids
            .iter()
            .map(|id| {
                (
                    *id,
                    FrameInput {
                        truth: &truths[*id as usize],
                        image: None,
                    },
                )
            })
            .collect();
        ReviewSession::pseudo_label(round, &det, &frames, 0.25).unwrap()
    }

    #[test]
    fn accepting_noiseless_proposals_yields_truth() {
        let rounds = plan_rounds(6, 2, 4).unwrap();
        let truths: Vec<FrameTruth> = (0..6).map(frame).collect();
        assert!(ReviewSession::manual(rounds[1].clone()).is_err());
        let mut s = session(rounds[1].clone(), &truths);
        for id in 2..6 {
            assert!(!s.is_closed());
            s.accept_all(id).unwrap();
            assert_eq!(s.status(id), Some(ReviewStatus::Accepted));
            let want: Vec<LabelBox> = truths[id as usize].boxes.iter().map(LabelBox::from_truth).collect();
            assert_eq!(s.labels(id), want);
        }
        assert!(s.is_closed());
    }

    #[test]
    fn rejections_and_corrections_are_audited() {
        let rounds = plan_rounds(6, 2, 4).unwrap();
        let truths: Vec<FrameTruth> = (0..6).map(frame).collect();
        let mut s = session(rounds[1].clone(), &truths);
        s.act(2, ReviewAction::Reject { proposal: 0 }).unwrap();
        s.act(2, ReviewAction::Reject { proposal: 1 }).unwrap();
        assert!(s.act(2, ReviewAction::Reject { proposal: 1 }).is_err());
        s.act(2, ReviewAction::Finish).unwrap();
        assert!(s.labels(2).is_empty());
        assert_eq!(s.status(2), Some(ReviewStatus::Corrected));
        let rejections = s
            .audit_trail()
            .iter()
            .filter(|e| matches!(e.action, ReviewAction::Reject { .. }))
            .count();
        assert_eq!(rejections, 2);

        let original = s.proposals[&3][0].label_box;
        let fixed = LabelBox {
            label: StageLabel::FirstCleavage,
            ..original
        };
        s.act(
            3,
            ReviewAction::Correct {
                proposal: 0,
                replacement: fixed,
            },
        )
        .unwrap();
        assert!(s.act(3, ReviewAction::Finish).is_err());
        s.act(3, ReviewAction::Accept { proposal: 1 }).unwrap();
        s.act(3, ReviewAction::Finish).unwrap();
        assert_eq!(s.labels(3)[0], fixed);
        let entry = s
            .audit_trail()
            .iter()
            .find(|e| matches!(e.action, ReviewAction::Correct { .. }))
            .unwrap();
        assert_eq!(entry.original, Some(original));

        let dir = tempfile::tempdir().unwrap();
        export_labels(dir.path(), &s.reviewed_labels()).unwrap();
        let text = fs::read_to_string(dir.path().join(label_file_name(3))).unwrap();
        assert!(text.starts_with("1 "));
        assert_eq!(fs::read_to_string(dir.path().join(label_file_name(2))).unwrap(), "");
        assert_eq!(import_labels(dir.path()).unwrap(), s.reviewed_labels());

        let recs = s.audit_records(0.0).unwrap();
        assert_eq!(recs.len(), s.audit_trail().len());
        let back: AuditEntry = recs[4].payload_as().unwrap();
        assert_eq!(&back, &s.audit_trail()[4]);
    }
}
