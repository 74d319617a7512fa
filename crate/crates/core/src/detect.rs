//! Detectors: a noise-configurable oracle that perturbs ground truth, and a
//! classical reference detector that works on rendered rasters.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, Detection, OperationalMode, StageLabel};
use crate::raster::{self, boundary_sharpness, connected_components, Component, GrayImage, RenderConfig};
use crate::simtank::FrameTruth;

/// Which producer a detection record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Truth,
    Oracle,
    Reference,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Truth => "truth",
            Source::Oracle => "oracle",
            Source::Reference => "reference",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
    /// Seconds of wall-clock processing.
    pub inference_time: f64,
}

/// Everything a detector may look at for one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub truth: &'a FrameTruth,
    pub image: Option<&'a GrayImage>,
}

pub trait Detector: Send + Sync {
    fn source(&self) -> Source;

    /// The mode this detector is bound to, if any.
    fn mode(&self) -> Option<OperationalMode> {
        None
    }

    fn detect(&self, frame: FrameInput<'_>) -> Result<DetectionResult>;
}

fn check_mode(det: &dyn Detector, frame_id: u64, actual: OperationalMode) -> Result<()> {
    match det.mode() {
        Some(expected) if expected != actual => Err(Error::ModeMismatch {
            frame_id,
            expected,
            actual,
        }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub true_mean: f64,
    pub true_sigma: f64,
    pub false_mean: f64,
    pub false_sigma: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            true_mean: 0.85,
            true_sigma: 0.1,
            false_mean: 0.55,
            false_sigma: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    pub miss_rate: f64,
    /// Poisson mean of spurious boxes per frame.
    pub false_positive_rate_per_frame: f64,
    /// Row-stochastic relabeling matrix over the mode's taxonomy.
    pub confusion: Vec<Vec<f64>>,
    /// Standard deviation of box-edge jitter, normalized units.
    pub box_jitter_sigma: f64,
    pub confidence: ConfidenceModel,
    /// Side length range of spurious boxes, normalized units.
    pub false_positive_size: (f64, f64),
}

impl DetectorNoise {
    /// No misses, no false positives, identity confusion, confidence 1.
    pub fn identity(mode: OperationalMode) -> Self {
        let n = mode.labels().len();
        DetectorNoise {
            miss_rate: 0.0,
            false_positive_rate_per_frame: 0.0,
            confusion: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            box_jitter_sigma: 0.0,
            confidence: ConfidenceModel {
                true_mean: 1.0,
                true_sigma: 0.0,
                false_mean: 0.5,
                false_sigma: 0.0,
            },
            false_positive_size: (0.02, 0.06),
        }
    }

    /// Keeps the label with probability `1 - p`, otherwise picks one of the
    /// other classes uniformly.
    pub fn with_uniform_confusion(mut self, p: f64) -> Self {
        let n = self.confusion.len();
        if n > 1 {
            for (i, row) in self.confusion.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if i == j { 1.0 - p } else { p / (n - 1) as f64 };
                }
            }
        }
        self
    }

    pub fn mode(&self) -> Option<OperationalMode> {
        match self.confusion.len() {
            6 => Some(OperationalMode::Surface),
            1 => Some(OperationalMode::SubSurface),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.miss_rate) && self.miss_rate != 1.0 {
            errs.push(format!("miss_rate {} outside [0, 1]", self.miss_rate));
        }
        if !(self.false_positive_rate_per_frame >= 0.0) {
            errs.push("false_positive_rate_per_frame must be >= 0".to_string());
        }
        if self.mode().is_none() {
            errs.push(format!(
                "confusion must be 6x6 (surface) or 1x1 (sub-surface), got {} rows",
                self.confusion.len()
            ));
        }
        let n = self.confusion.len();
        for (i, row) in self.confusion.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != n || row.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                errs.push(format!("confusion row {i} is not a probability vector"));
            }
        }
        if !(self.box_jitter_sigma >= 0.0) {
            errs.push("box_jitter_sigma must be >= 0".to_string());
        }
        let c = &self.confidence;
        if !(c.true_sigma >= 0.0 && c.false_sigma >= 0.0) {
            errs.push("confidence sigmas must be >= 0".to_string());
        }
        let (lo, hi) = self.false_positive_size;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            errs.push("false_positive_size must satisfy 0 < min <= max <= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// Perturbs ground truth according to a [`DetectorNoise`] model.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    noise: DetectorNoise,
    seed: u64,
    bound: Option<OperationalMode>,
}

impl OracleDetector {
    pub fn new(noise: DetectorNoise, seed: u64) -> Result<Self> {
        noise.validate()?;
        let bound = noise.mode();
        Ok(OracleDetector { noise, seed, bound })
    }

    pub fn noise(&self) -> &DetectorNoise {
        &self.noise
    }
}

impl Detector for OracleDetector {
    fn source(&self) -> Source {
        Source::Oracle
    }

    fn mode(&self) -> Option<OperationalMode> {
        self.bound
    }

    fn detect(&self, frame: FrameInput<'_>) -> Result<DetectionResult> {
        let started = Instant::now();
        let truth = frame.truth;
        check_mode(self, truth.frame_id, truth.mode)?;
        let seed = self.seed ^ truth.frame_id.wrapping_mul(0xA24B_AED4_963E_E407);
        let detections = oracle_detect(truth, &self.noise, seed)?;
        Ok(DetectionResult {
            frame_id: truth.frame_id,
            detections,
            inference_time: started.elapsed().as_secs_f64(),
        })
    }
}

/// Drops, relabels and jitters truth boxes, then adds Poisson spurious boxes.
pub fn oracle_detect(truth: &FrameTruth, noise: &DetectorNoise, seed: u64) -> Result<Vec<Detection>> {
    noise.validate()?;
    let labels = truth.mode.labels();
    if noise.confusion.len() != labels.len() {
        return Err(Error::ModeMismatch {
            frame_id: truth.frame_id,
            expected: noise.mode().unwrap_or(truth.mode),
            actual: truth.mode,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conf = &noise.confidence;
    let mut out = Vec::with_capacity(truth.boxes.len());

    for gt in &truth.boxes {
        if rng.random::<f64>() < noise.miss_rate {
            continue;
        }
        let row = &noise.confusion[gt.label.taxonomy_index()];
        let label = labels[sample_row(row, &mut rng)];
        let bbox = if noise.box_jitter_sigma > 0.0 {
            jitter(gt.bbox, noise.box_jitter_sigma, &mut rng)
        } else {
            gt.bbox
        };
        out.push(Detection {
            bbox,
            label,
            confidence: draw_confidence(conf.true_mean, conf.true_sigma, &mut rng),
        });
    }

    if noise.false_positive_rate_per_frame > 0.0 {
        let n = Poisson::new(noise.false_positive_rate_per_frame)
            .map_err(|e| Error::InvalidArgument(format!("false positive rate: {e}")))?
            .sample(&mut rng) as usize;
        let (lo, hi) = noise.false_positive_size;
        for _ in 0..n {
            let w = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let h = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let cx = w / 2.0 + rng.random::<f64>() * (1.0 - w);
            let cy = h / 2.0 + rng.random::<f64>() * (1.0 - h);
            let Some(bbox) = BoundingBox::from_center_clipped(cx, cy, w, h) else {
                continue;
            };
            let label = labels[rng.random_range(0..labels.len())];
            out.push(Detection {
                bbox,
                label,
                confidence: draw_confidence(conf.false_mean, conf.false_sigma, &mut rng),
            });
        }
    }
    Ok(out)
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // Rounding slack in the last cumulative sum.
    row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn draw_confidence<R: Rng>(mean: f64, sigma: f64, rng: &mut R) -> f64 {
    let v = if sigma > 0.0 {
        Normal::new(mean, sigma).expect("sigma > 0").sample(rng)
    } else {
        mean
    };
    v.clamp(0.0, 1.0)
}

fn jitter<R: Rng>(b: BoundingBox, sigma: f64, rng: &mut R) -> BoundingBox {
    let n = Normal::new(0.0, sigma).expect("sigma > 0");
    let x_min = (b.x_min + n.sample(rng)).clamp(0.0, 1.0);
    let y_min = (b.y_min + n.sample(rng)).clamp(0.0, 1.0);
    let x_max = (b.x_max + n.sample(rng)).clamp(0.0, 1.0);
    let y_max = (b.y_max + n.sample(rng)).clamp(0.0, 1.0);
    BoundingBox::new(x_min.min(x_max), y_min.min(y_max), x_min.max(x_max), y_min.max(y_max)).unwrap_or(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceParams {
    /// Pixels strictly above this intensity are foreground.
    pub threshold: u8,
    pub min_area: usize,
    /// Axis ratio at or above which a single-lobed blob is `Damaged`.
    pub damaged_elongation: f64,
    /// Axis ratio above which a single-lobed blob counts as two heavily
    /// overlapping lobes (first cleavage).
    pub cleavage_elongation: f64,
    /// Peaks below this fraction of the strongest distance value are ignored.
    pub peak_floor: f64,
    /// Two peaks are separate lobes only if the distance map dips below
    /// this fraction of the weaker peak somewhere on the segment joining them.
    pub saddle_ratio: f64,
    /// Boundary gradient (intensity per pixel) needed to call a blob in focus.
    pub focus_threshold: f64,
    /// Used when the frame carries no raster.
    pub render: RenderConfig,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        ReferenceParams {
            threshold: 100,
            min_area: 30,
            damaged_elongation: 2.0,
            cleavage_elongation: 1.05,
            peak_floor: 0.5,
            saddle_ratio: 0.8,
            focus_threshold: 25.0,
            render: RenderConfig::default(),
        }
    }
}

/// Shape descriptors computed for one connected component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobShape {
    pub lobes: usize,
    /// Largest peak distance between two surviving lobe centers, in lobe radii.
    pub max_lobe_separation: f64,
    pub elongation: f64,
    pub solidity: f64,
}

/// Thresholding + connected components + lobe-count staging.
#[derive(Debug, Clone, Default)]
pub struct ReferenceDetector {
    pub params: ReferenceParams,
    pub bound: Option<OperationalMode>,
}

impl ReferenceDetector {
    pub fn new(params: ReferenceParams) -> Self {
        ReferenceDetector { params, bound: None }
    }

    pub fn bound_to(mut self, mode: OperationalMode) -> Self {
        self.bound = Some(mode);
        self
    }
}

impl Detector for ReferenceDetector {
    fn source(&self) -> Source {
        Source::Reference
    }

    fn mode(&self) -> Option<OperationalMode> {
        self.bound
    }

    fn detect(&self, frame: FrameInput<'_>) -> Result<DetectionResult> {
        let truth = frame.truth;
        check_mode(self, truth.frame_id, truth.mode)?;
        let rendered;
        let image = match frame.image {
            Some(img) => img,
            None => {
                rendered = raster::render_frame(truth, &self.params.render)?.image;
                &rendered
            }
        };
        let mut result = reference_detect(image, truth.mode, &self.params)?;
        result.frame_id = truth.frame_id;
        Ok(result)
    }
}

pub fn reference_detect(image: &GrayImage, mode: OperationalMode, params: &ReferenceParams) -> Result<DetectionResult> {
    let started = Instant::now();
    if image.is_empty() {
        return Err(Error::Empty("image"));
    }
    if params.threshold == 0 || params.threshold == u8::MAX {
        return Err(Error::InvalidArgument(format!(
            "degenerate binarization threshold {}",
            params.threshold
        )));
    }
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut detections = Vec::new();
    for comp in connected_components(image, params.threshold) {
        if comp.area() < params.min_area {
            continue;
        }
        let bbox = BoundingBox::new(
            comp.x_min as f64 / w,
            comp.y_min as f64 / h,
            (comp.x_max + 1) as f64 / w,
            (comp.y_max + 1) as f64 / h,
        )?;
        let label = match mode {
            OperationalMode::Surface => classify_surface(&blob_shape(&comp, params), params),
            OperationalMode::SubSurface => {
                if boundary_sharpness(image, &comp) >= params.focus_threshold {
                    StageLabel::CoralInFocus
                } else {
                    continue;
                }
            }
        };
        detections.push(Detection {
            bbox,
            label,
            confidence: comp.solidity(),
        });
    }
    Ok(DetectionResult {
        frame_id: 0,
        detections,
        inference_time: started.elapsed().as_secs_f64(),
    })
}

/// Counts lobes as distance-transform peaks after non-maximum suppression.
pub fn blob_shape(comp: &Component, params: &ReferenceParams) -> BlobShape {
    let (w, h, mask) = comp.mask();
    let dist = raster::distance_transform(w, h, &mask);
    let max_d = dist.iter().copied().fold(0.0, f64::max);
    let floor = params.peak_floor * max_d;

    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let d = dist[y * w + x];
            if d < floor || d <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'n: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy) == (0, 0) {
                        continue;
                    }
                    let q = (y as i64 + dy) as usize * w + (x as i64 + dx) as usize;
                    if dist[q] > d {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                peaks.push((d, x, y));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));

    let lobe_radius = max_d.max(1.0);
    let at = |x: f64, y: f64| dist[(y.round() as usize).min(h - 1) * w + (x.round() as usize).min(w - 1)];
    // Lowest distance value on the straight path between two points.
    let saddle = |a: (f64, f64, f64), b: (f64, f64, f64)| {
        let len = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let steps = len.ceil().max(1.0) as usize;
        (0..=steps)
            .map(|i| {
                let t = i as f64 / steps as f64;
                at(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut kept: Vec<(f64, f64, f64)> = Vec::new();
    for (d, x, y) in peaks {
        let p = (x as f64, y as f64, d);
        if kept.iter().all(|&k| saddle(k, p) < params.saddle_ratio * k.2.min(d)) {
            kept.push(p);
        }
    }
    let mut max_sep: f64 = 0.0;
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            max_sep = max_sep.max(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
        }
    }
    BlobShape {
        lobes: kept.len(),
        max_lobe_separation: max_sep / lobe_radius,
        elongation: comp.elongation(),
        solidity: comp.solidity(),
    }
}

pub fn classify_surface(shape: &BlobShape, params: &ReferenceParams) -> StageLabel {
    match shape.lobes {
        0 | 1 if shape.elongation >= params.damaged_elongation => StageLabel::Damaged,
        0 | 1 if shape.elongation >= params.cleavage_elongation => StageLabel::FirstCleavage,
        0 | 1 => StageLabel::Egg,
        2 if shape.max_lobe_separation < 1.2 => StageLabel::FirstCleavage,
        2 => StageLabel::TwoCell,
        3..=8 => StageLabel::FourToEightCell,
        _ => StageLabel::Advanced,
    }
}

/// Picks the focus threshold that best separates sharp (annotated) blobs
/// from blurred ones on a held-out frame: the midpoint between the two
/// groups' median scores.
pub fn calibrate_focus_threshold(image: &GrayImage, truth: &FrameTruth, params: &ReferenceParams) -> Option<f64> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut sharp = Vec::new();
    let mut soft = Vec::new();
    for comp in connected_components(image, params.threshold) {
        if comp.area() < params.min_area {
            continue;
        }
        let (cx, cy) = (
            (comp.x_min + comp.x_max + 1) as f64 / 2.0 / w,
            (comp.y_min + comp.y_max + 1) as f64 / 2.0 / h,
        );
        let inside = |b: &BoundingBox| cx >= b.x_min && cx <= b.x_max && cy >= b.y_min && cy <= b.y_max;
        let score = boundary_sharpness(image, &comp);
        if truth.boxes.iter().any(|g| inside(&g.bbox)) {
            sharp.push(score);
        } else if truth.blurred.iter().any(inside) {
            soft.push(score);
        }
    }
    if sharp.is_empty() || soft.is_empty() {
        return None;
    }
    Some((median(&mut sharp) + median(&mut soft)) / 2.0)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::iou;
    use crate::model::GroundTruthBox;
    use crate::raster::render_frame;

    fn truth_with(mode: OperationalMode, boxes: Vec<GroundTruthBox>) -> FrameTruth {
        let n = boxes.len() as u64;
        FrameTruth {
            frame_id: 7,
            time: 0.0,
            mode,
            boxes,
            blurred: vec![],
            visible_count: n,
            in_focus_count: n,
            tank_population: n,
            tank_counts: Default::default(),
        }
    }

    fn gt(label: StageLabel, x0: f64, y0: f64, x1: f64, y1: f64) -> GroundTruthBox {
        GroundTruthBox {
            bbox: BoundingBox::new(x0, y0, x1, y1).unwrap(),
            label,
        }
    }

    fn noiseless() -> ReferenceParams {
        ReferenceParams {
            render: RenderConfig {
                width: 640,
                height: 480,
                noise_sigma: 0.0,
                ..RenderConfig::default()
            },
            ..ReferenceParams::default()
        }
    }

    /// Square in pixels for a 640x480 canvas.
    fn square(label: StageLabel, cx: f64, cy: f64, side_px: f64) -> GroundTruthBox {
        let (w, h) = (side_px / 640.0, side_px / 480.0);
        gt(label, cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    #[test]
    fn zero_noise_oracle_echoes_truth() {
        let t = truth_with(
            OperationalMode::Surface,
            vec![
                gt(StageLabel::Egg, 0.1, 0.1, 0.2, 0.2),
                gt(StageLabel::Advanced, 0.5, 0.5, 0.6, 0.7),
            ],
        );
        let d = oracle_detect(&t, &DetectorNoise::identity(OperationalMode::Surface), 1).unwrap();
        assert_eq!(d.len(), 2);
        for (det, g) in d.iter().zip(&t.boxes) {
            assert_eq!(det.bbox, g.bbox);
            assert_eq!(det.label, g.label);
            assert_eq!(det.confidence, 1.0);
        }
    }

    #[test]
    fn full_miss_leaves_only_false_positives() {
        let t = truth_with(
            OperationalMode::Surface,
            vec![gt(StageLabel::Egg, 0.1, 0.1, 0.2, 0.2); 20],
        );
        let noise = DetectorNoise {
            miss_rate: 1.0,
            false_positive_rate_per_frame: 3.0,
            ..DetectorNoise::identity(OperationalMode::Surface)
        };
        let mut total = 0;
        for seed in 0..50 {
            let d = oracle_detect(&t, &noise, seed).unwrap();
            assert!(d.iter().all(|x| x.confidence == 0.5));
            total += d.len();
        }
        assert!(total > 100 && total < 200, "{total}");
    }

    #[test]
    fn oracle_is_seed_deterministic_and_mode_bound() {
        let t = truth_with(
            OperationalMode::Surface,
            vec![gt(StageLabel::Egg, 0.1, 0.1, 0.2, 0.2); 5],
        );
        let noise = DetectorNoise {
            miss_rate: 0.3,
            box_jitter_sigma: 0.01,
            ..DetectorNoise::identity(OperationalMode::Surface).with_uniform_confusion(0.2)
        };
        let det = OracleDetector::new(noise.clone(), 9).unwrap();
        let a = det.detect(FrameInput { truth: &t, image: None }).unwrap();
        let b = det.detect(FrameInput { truth: &t, image: None }).unwrap();
        assert_eq!(a.detections, b.detections);

        let sub = truth_with(OperationalMode::SubSurface, vec![]);
        assert!(matches!(
            det.detect(FrameInput {
                truth: &sub,
                image: None
            }),
            Err(Error::ModeMismatch { frame_id: 7, .. })
        ));
    }

    #[test]
    fn confusion_rows_must_be_stochastic() {
        let mut noise = DetectorNoise::identity(OperationalMode::Surface);
        noise.confusion[2][2] = 0.9;
        assert!(noise.validate().is_err());
        let noise = DetectorNoise::identity(OperationalMode::Surface).with_uniform_confusion(0.05);
        noise.validate().unwrap();
    }

    #[test]
    fn background_only_gives_nothing() {
        let t = truth_with(OperationalMode::Surface, vec![]);
        let p = ReferenceParams::default();
        let r = ReferenceDetector::new(p)
            .detect(FrameInput { truth: &t, image: None })
            .unwrap();
        assert!(r.detections.is_empty());
    }

    #[test]
    fn single_egg_round_trip() {
        let t = truth_with(OperationalMode::Surface, vec![square(StageLabel::Egg, 0.5, 0.5, 60.0)]);
        let p = noiseless();
        let r = ReferenceDetector::new(p)
            .detect(FrameInput { truth: &t, image: None })
            .unwrap();
        assert_eq!(r.detections.len(), 1);
        assert_eq!(r.detections[0].label, StageLabel::Egg);
        assert!(iou(&r.detections[0].bbox, &t.boxes[0].bbox) >= 0.5);
    }

    #[test]
    fn damaged_ellipse_is_elongated() {
        // Axis ratio 3 in pixels: 120 x 40.
        let (w, h) = (120.0 / 640.0, 40.0 / 480.0);
        let t = truth_with(
            OperationalMode::Surface,
            vec![gt(StageLabel::Damaged, 0.4, 0.4, 0.4 + w, 0.4 + h)],
        );
        let p = noiseless();
        let img = render_frame(&t, &p.render).unwrap().image;
        let comps = connected_components(&img, p.threshold);
        assert_eq!(comps.len(), 1);
        // Oracle: the drawn ellipse has semi-axes 60 and 20 px.
        let e = comps[0].elongation();
        assert!((e - 3.0).abs() < 0.1, "elongation {e}");
        let r = reference_detect(&img, OperationalMode::Surface, &p).unwrap();
        assert_eq!(r.detections[0].label, StageLabel::Damaged);
    }

    #[test]
    fn lobe_counts_stage_clusters() {
        let p = noiseless();
        let cases = [
            (StageLabel::Egg, 1.0),
            (StageLabel::FirstCleavage, 1.2),
            (StageLabel::TwoCell, 1.95),
            (StageLabel::FourToEightCell, 1.0),
            (StageLabel::Advanced, 1.0),
        ];
        for (label, aspect) in cases {
            for k in 0..4 {
                let side = 100.0;
                let (w, h) = (side * aspect / 640.0, side / 480.0);
                let t = FrameTruth {
                    frame_id: k,
                    ..truth_with(OperationalMode::Surface, vec![gt(label, 0.3, 0.3, 0.3 + w, 0.3 + h)])
                };
                let img = render_frame(&t, &p.render).unwrap().image;
                let r = reference_detect(&img, OperationalMode::Surface, &p).unwrap();
                assert_eq!(r.detections.len(), 1, "{label}");
                assert_eq!(r.detections[0].label, label, "frame {k}");
            }
        }
    }

    #[test]
    fn subsurface_keeps_only_sharp_blobs() {
        let mut t = truth_with(
            OperationalMode::SubSurface,
            vec![square(StageLabel::CoralInFocus, 0.3, 0.3, 60.0)],
        );
        t.blurred.push(BoundingBox::new(0.6, 0.6, 0.7, 0.72).unwrap());
        let p = ReferenceParams {
            render: RenderConfig {
                width: 640,
                height: 480,
                ..RenderConfig::default()
            },
            ..ReferenceParams::default()
        };
        let img = render_frame(&t, &p.render).unwrap().image;
        let calibrated = calibrate_focus_threshold(&img, &t, &p).unwrap();
        assert!(calibrated > 0.0);
        let r = reference_detect(&img, OperationalMode::SubSurface, &p).unwrap();
        assert_eq!(r.detections.len(), 1);
        assert!(iou(&r.detections[0].bbox, &t.boxes[0].bbox) >= 0.5);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let img = GrayImage::new(0, 0, 0);
        assert!(reference_detect(&img, OperationalMode::Surface, &ReferenceParams::default()).is_err());
        let img = GrayImage::new(4, 4, 0);
        let p = ReferenceParams {
            threshold: 255,
            ..ReferenceParams::default()
        };
        assert!(reference_detect(&img, OperationalMode::Surface, &p).is_err());
    }
}
