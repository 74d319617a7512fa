//! Detection evaluation: IoU, greedy same-label matching, per-class
//! precision/recall/F1, all-points AP@0.5, and the macro aggregates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{taxonomy_of, BoundingBox, Detection, GroundTruthBox, OperationalMode, StageLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            iou_threshold: 0.5,
            confidence_threshold: 0.5,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if ok(self.iou_threshold) && ok(self.confidence_threshold) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "thresholds must lie in (0, 1]: iou {}, confidence {}",
                self.iou_threshold, self.confidence_threshold
            )))
        }
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Outcome of matching one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMatch {
    /// Per detection: `Some(true)` TP, `Some(false)` FP, `None` below the
    /// confidence threshold (ignored for P/R/F1).
    pub detection_tp: Vec<Option<bool>>,
    pub truth_matched: Vec<bool>,
}

impl FrameMatch {
    pub fn tp(&self) -> usize {
        self.detection_tp.iter().filter(|d| **d == Some(true)).count()
    }

    pub fn fp(&self) -> usize {
        self.detection_tp.iter().filter(|d| **d == Some(false)).count()
    }

    pub fn fn_(&self) -> usize {
        self.truth_matched.iter().filter(|m| !**m).count()
    }
}

/// Descending confidence; equal confidences keep input order.
fn by_confidence(dets: &[Detection], keep: impl Fn(&Detection) -> bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| keep(&dets[i])).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Best unmatched same-label truth for `det`, if it clears the IoU threshold.
/// Ties in IoU go to the lower truth index.
fn best_truth(det: &Detection, truth: &[GroundTruthBox], matched: &[bool], iou_threshold: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, t) in truth.iter().enumerate() {
        if matched[j] || t.label != det.label {
            continue;
        }
        let v = iou(&det.bbox, &t.bbox);
        if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

pub fn match_frame(dets: &[Detection], truth: &[GroundTruthBox], cfg: &MatchConfig) -> Result<FrameMatch> {
    taxonomy_of(dets.iter().map(|d| d.label).chain(truth.iter().map(|t| t.label)))?;
    let mut out = FrameMatch {
        detection_tp: vec![None; dets.len()],
        truth_matched: vec![false; truth.len()],
    };
    for i in by_confidence(dets, |d| d.confidence >= cfg.confidence_threshold) {
        let hit = best_truth(&dets[i], truth, &out.truth_matched, cfg.iou_threshold);
        if let Some(j) = hit {
            out.truth_matched[j] = true;
        }
        out.detection_tp[i] = Some(hit.is_some());
    }
    Ok(out)
}

/// One frame of an evaluation dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
    pub truths: Vec<GroundTruthBox>,
}

/// Points of the precision/recall curve, one per distinct confidence level
/// from high to low.
pub fn precision_recall_curve(frames: &[EvalFrame], label: StageLabel, iou_threshold: f64) -> Result<Vec<(f64, f64)>> {
    let n_truth: usize = frames
        .iter()
        .map(|f| f.truths.iter().filter(|t| t.label == label).count())
        .sum();
    if n_truth == 0 {
        return Err(Error::NoTruth(label));
    }
    // (confidence, frame_id, frame index, detection index)
    let mut pool: Vec<(f64, u64, usize, usize)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        for (di, d) in f.detections.iter().enumerate() {
            if d.label == label {
                pool.push((d.confidence, f.frame_id, fi, di));
            }
        }
    }
    pool.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });

    let mut matched: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.truths.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    let mut i = 0;
    while i < pool.len() {
        let level = pool[i].0;
        while i < pool.len() && pool[i].0 == level {
            let (_, _, fi, di) = pool[i];
            let f = &frames[fi];
            match best_truth(&f.detections[di], &f.truths, &matched[fi], iou_threshold) {
                Some(j) => {
                    matched[fi][j] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            i += 1;
        }
        curve.push((tp as f64 / n_truth as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(curve)
}

/// Area under the monotone precision envelope (all-points integration).
pub fn average_precision(frames: &[EvalFrame], label: StageLabel, iou_threshold: f64) -> Result<f64> {
    let curve = precision_recall_curve(frames, label, iou_threshold)?;
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, (recall, _)) in curve.iter().enumerate() {
        ap += (recall - prev_recall) * envelope[k];
        prev_recall = *recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: StageLabel,
    pub truth_count: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// 0 when there are no detections above threshold.
    pub precision: f64,
    /// 0 when there are no truths.
    pub recall: f64,
    pub f1: f64,
    /// `None` when the class has no truth instances.
    pub ap: Option<f64>,
}

impl ClassMetrics {
    pub fn from_counts(label: StageLabel, tp: u64, fp: u64, fn_: u64, ap: Option<f64>) -> Self {
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        ClassMetrics {
            label,
            truth_count: tp + fn_,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1(precision, recall),
            ap,
        }
    }

    /// Builds a row from already-known rates (for example a published table).
    pub fn from_rates(label: StageLabel, precision: f64, recall: f64, ap: f64) -> Self {
        ClassMetrics {
            label,
            truth_count: 1,
            tp: 0,
            fp: 0,
            fn_: 0,
            precision,
            recall,
            f1: f1(precision, recall),
            ap: Some(ap),
        }
    }

    pub fn present(&self) -> bool {
        self.truth_count > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: OperationalMode,
    pub frames: usize,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: Option<f64>,
    pub macro_f1_excluding_damaged: Option<f64>,
    pub map_50: Option<f64>,
    /// Classes without truth instances, excluded from the macro means.
    pub absent: Vec<StageLabel>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// Unweighted macro means over the present classes.
    pub fn from_class_metrics(mode: OperationalMode, frames: usize, per_class: Vec<ClassMetrics>) -> Self {
        let present = || per_class.iter().filter(|c| c.present());
        EvalReport {
            mode,
            frames,
            macro_f1: mean(present().map(|c| c.f1)),
            macro_f1_excluding_damaged: mean(present().filter(|c| c.label != StageLabel::Damaged).map(|c| c.f1)),
            map_50: mean(present().filter_map(|c| c.ap)),
            absent: per_class.iter().filter(|c| !c.present()).map(|c| c.label).collect(),
            per_class,
        }
    }

    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("   -".to_string(), |v| format!("{:5.1}", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "# detection evaluation ({} mode, {} frames)", self.mode, self.frames);
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "class", "truth", "tp", "fp", "fn", "P", "R", "F1", "AP"
        );
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
                c.label.as_str(),
                c.truth_count,
                c.tp,
                c.fp,
                c.fn_,
                pct(Some(c.precision)),
                pct(Some(c.recall)),
                pct(Some(c.f1)),
                pct(c.ap)
            );
        }
        let _ = writeln!(s, "macro F1            {}", pct(self.macro_f1));
        let _ = writeln!(s, "macro F1 ex. damaged{}", pct(self.macro_f1_excluding_damaged));
        let _ = writeln!(s, "mAP@0.5             {}", pct(self.map_50));
        if !self.absent.is_empty() {
            let names: Vec<&str> = self.absent.iter().map(|l| l.as_str()).collect();
            let _ = writeln!(s, "absent: {}", names.join(", "));
        }
        s
    }
}

pub fn evaluate(frames: &[EvalFrame], cfg: &MatchConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mode = taxonomy_of(frames.iter().flat_map(|f| {
        f.detections
            .iter()
            .map(|d| d.label)
            .chain(f.truths.iter().map(|t| t.label))
    }))?
    .unwrap_or(OperationalMode::Surface);

    let labels = mode.labels();
    let mut tp = vec![0u64; labels.len()];
    let mut fp = vec![0u64; labels.len()];
    let mut fn_ = vec![0u64; labels.len()];
    for f in frames {
        let m = match_frame(&f.detections, &f.truths, cfg)?;
        for (d, hit) in f.detections.iter().zip(&m.detection_tp) {
            match hit {
                Some(true) => tp[d.label.taxonomy_index()] += 1,
                Some(false) => fp[d.label.taxonomy_index()] += 1,
                None => {}
            }
        }
        for (t, hit) in f.truths.iter().zip(&m.truth_matched) {
            if !hit {
                fn_[t.label.taxonomy_index()] += 1;
            }
        }
    }
    let per_class = labels
        .iter()
        .enumerate()
        .map(|(k, &label)| {
            let ap = match average_precision(frames, label, cfg.iou_threshold) {
                Ok(v) => Some(v),
                Err(Error::NoTruth(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(ClassMetrics::from_counts(label, tp[k], fp[k], fn_[k], ap))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_class_metrics(mode, frames.len(), per_class))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(b: BoundingBox, label: StageLabel, confidence: f64) -> Detection {
        Detection {
            bbox: b,
            label,
            confidence,
        }
    }

    fn gt(b: BoundingBox, label: StageLabel) -> GroundTruthBox {
        GroundTruthBox { bbox: b, label }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 0.1, 0.1);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.5, 0.5, 0.6, 0.6)), 0.0);
        // overlap 0.005, union 0.015
        let v = iou(&a, &bx(0.05, 0.0, 0.15, 0.1));
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn f1_examples() {
        assert!((f1(0.42, 0.42) - 0.42).abs() < 1e-15);
        assert!((f1(91.1, 89.9) - 90.5).abs() < 0.05);
        assert!((f1(64.9, 65.7) - 65.3).abs() < 0.05);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn perfect_frame_is_all_tp() {
        let t = vec![
            gt(bx(0.1, 0.1, 0.2, 0.2), StageLabel::Egg),
            gt(bx(0.4, 0.4, 0.5, 0.5), StageLabel::TwoCell),
        ];
        let d: Vec<_> = t.iter().map(|g| det(g.bbox, g.label, 1.0)).collect();
        let m = match_frame(&d, &t, &MatchConfig::default()).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_()), (2, 0, 0));
    }

    #[test]
    fn single_assignment() {
        let b = bx(0.1, 0.1, 0.2, 0.2);
        let t = vec![gt(b, StageLabel::Egg)];
        for conf in [(0.9, 0.8), (0.8, 0.9), (0.7, 0.7)] {
            let d = vec![det(b, StageLabel::Egg, conf.0), det(b, StageLabel::Egg, conf.1)];
            let m = match_frame(&d, &t, &MatchConfig::default()).unwrap();
            assert_eq!((m.tp(), m.fp(), m.fn_()), (1, 1, 0));
        }
    }

    #[test]
    fn low_confidence_ignored_and_labels_must_match() {
        let b = bx(0.1, 0.1, 0.2, 0.2);
        let t = vec![gt(b, StageLabel::Egg)];
        let m = match_frame(&[det(b, StageLabel::Egg, 0.4)], &t, &MatchConfig::default()).unwrap();
        assert_eq!(m.detection_tp, vec![None]);
        assert_eq!(m.fn_(), 1);
        let m = match_frame(&[det(b, StageLabel::TwoCell, 0.9)], &t, &MatchConfig::default()).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_()), (0, 1, 1));
        assert!(match_frame(&[det(b, StageLabel::CoralInFocus, 0.9)], &t, &MatchConfig::default()).is_err());
    }

    #[test]
    fn ap_edge_cases() {
        let b = bx(0.1, 0.1, 0.2, 0.2);
        let frames = vec![EvalFrame {
            frame_id: 0,
            detections: vec![],
            truths: vec![gt(b, StageLabel::Egg)],
        }];
        assert_eq!(average_precision(&frames, StageLabel::Egg, 0.5).unwrap(), 0.0);
        assert!(matches!(
            average_precision(&frames, StageLabel::Advanced, 0.5),
            Err(Error::NoTruth(StageLabel::Advanced))
        ));
        let perfect = vec![EvalFrame {
            frame_id: 0,
            detections: vec![det(b, StageLabel::Egg, 0.3)],
            truths: vec![gt(b, StageLabel::Egg)],
        }];
        assert_eq!(average_precision(&perfect, StageLabel::Egg, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn ap_hand_computed() {
        // Ranks: TP(0.9), FP(0.8), TP(0.7); two truths.
        // PR points: (0.5, 1), (0.5, 0.5), (1, 2/3). Envelope area: 0.5*1 + 0.5*2/3.
        let a = bx(0.1, 0.1, 0.2, 0.2);
        let b = bx(0.5, 0.5, 0.6, 0.6);
        let frames = vec![EvalFrame {
            frame_id: 0,
            detections: vec![
                det(a, StageLabel::Egg, 0.9),
                det(bx(0.8, 0.8, 0.9, 0.9), StageLabel::Egg, 0.8),
                det(b, StageLabel::Egg, 0.7),
            ],
            truths: vec![gt(a, StageLabel::Egg), gt(b, StageLabel::Egg)],
        }];
        let ap = average_precision(&frames, StageLabel::Egg, 0.5).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn truth_against_itself_scores_one() {
        let frames: Vec<EvalFrame> = (0..5)
            .map(|i| {
                let x = 0.1 * i as f64;
                let truths = vec![
                    gt(bx(x, 0.1, x + 0.05, 0.15), StageLabel::SURFACE[i % 6]),
                    gt(bx(x, 0.5, x + 0.05, 0.55), StageLabel::SURFACE[(i + 2) % 6]),
                ];
                EvalFrame {
                    frame_id: i as u64,
                    detections: truths.iter().map(|t| det(t.bbox, t.label, 1.0)).collect(),
                    truths,
                }
            })
            .collect();
        let r = evaluate(&frames, &MatchConfig::default()).unwrap();
        for c in r.per_class.iter().filter(|c| c.present()) {
            assert_eq!((c.precision, c.recall, c.f1, c.ap), (1.0, 1.0, 1.0, Some(1.0)));
        }
        assert_eq!(r.macro_f1, Some(1.0));
        assert!(evaluate(&[], &MatchConfig::default()).is_err());
    }

    #[test]
    fn absent_classes_are_excluded() {
        let b = bx(0.1, 0.1, 0.2, 0.2);
        let frames = vec![EvalFrame {
            frame_id: 0,
            detections: vec![det(b, StageLabel::Egg, 0.9)],
            truths: vec![gt(b, StageLabel::Egg)],
        }];
        let r = evaluate(&frames, &MatchConfig::default()).unwrap();
        assert_eq!(r.absent.len(), 5);
        assert_eq!(r.macro_f1, Some(1.0));
        assert_eq!(r.map_50, Some(1.0));
        assert!(r.to_text().contains("absent: first_cleavage"));
    }
}
