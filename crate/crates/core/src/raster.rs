//! Grayscale rasters: portable-graymap IO, the synthetic frame renderer, and
//! the low-level image operations used by the reference detector.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StageLabel;
use crate::simtank::FrameTruth;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, fill: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![fill; width as usize * height as usize],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidArgument(format!(
                "raster of {width}x{height} needs {} bytes, got {}",
                width as usize * height as usize,
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)
    }

    pub fn read_pgm<R: BufRead>(mut input: R) -> Result<Self> {
        let mut header = Vec::new();
        let mut fields = Vec::<String>::new();
        // Magic, width, height, maxval; '#' comments allowed between fields.
        while fields.len() < 4 {
            header.clear();
            let n = input.read_until(b'\n', &mut header)?;
            if n == 0 {
                return Err(Error::InvalidArgument("truncated PGM header".into()));
            }
            let line = String::from_utf8_lossy(&header);
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P5" || fields.len() != 4 {
            return Err(Error::InvalidArgument("expected a binary P5 graymap".into()));
        }
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| Error::InvalidArgument(format!("bad PGM header field {s:?}")))
        };
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::InvalidArgument(format!("unsupported maxval {maxval}")));
        }
        let mut data = vec![0u8; w as usize * h as usize];
        input.read_exact(&mut data)?;
        GrayImage::from_raw(w, h, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub background: u8,
    pub foreground: u8,
    /// Peak intensity of out-of-focus individuals.
    pub blurred_peak: u8,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 1920,
            height: 1080,
            background: 40,
            foreground: 200,
            blurred_peak: 170,
            noise_sigma: 6.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: GrayImage,
    /// Indices of truth boxes whose organism is cut by the image border.
    pub clipped: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
}

/// Primitive shapes the renderer composes. Exposed for tests that need the
/// drawn geometry (for example the true axis ratio of a damaged ellipse).
#[derive(Debug, Clone)]
pub enum Morphology {
    Discs(Vec<(f64, f64, f64)>),
    Ellipse { cx: f64, cy: f64, a: f64, b: f64 },
}

/// Geometry in pixel coordinates for an organism whose box spans
/// `(x0, y0)..(x1, y1)`.
pub fn morphology<R: Rng>(label: StageLabel, x0: f64, y0: f64, x1: f64, y1: f64, rng: &mut R) -> Morphology {
    let (w, h) = (x1 - x0, y1 - y0);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let horizontal = w >= h;
    let short = w.min(h);
    let along = |offset: f64| {
        if horizontal {
            (cx + offset, cy)
        } else {
            (cx, cy + offset)
        }
    };
    let discs: Vec<Disc> = match label {
        StageLabel::Egg => vec![Disc { cx, cy, r: short / 2.0 }],
        StageLabel::FirstCleavage | StageLabel::TwoCell => {
            let r = short / 2.0;
            // Center distance 0.4 r (heavy overlap) vs 1.9 r (touching lobes).
            let half = if label == StageLabel::FirstCleavage {
                0.2 * r
            } else {
                0.95 * r
            };
            let (ax, ay) = along(-half);
            let (bx, by) = along(half);
            vec![Disc { cx: ax, cy: ay, r }, Disc { cx: bx, cy: by, r }]
        }
        StageLabel::FourToEightCell | StageLabel::Advanced => {
            let n = if label == StageLabel::FourToEightCell {
                rng.random_range(4..=8)
            } else {
                rng.random_range(12..=16)
            };
            ring(cx, cy, short / 2.0, n, rng.random::<f64>() * 2.0 * PI)
        }
        StageLabel::Damaged | StageLabel::CoralInFocus => {
            return Morphology::Ellipse {
                cx,
                cy,
                a: w / 2.0,
                b: h / 2.0,
            }
        }
    };
    Morphology::Discs(discs.into_iter().map(|d| (d.cx, d.cy, d.r)).collect())
}

/// `n` equal discs on a ring whose outer extent is `radius`; neighbours
/// overlap slightly (center spacing 1.7 r) so the cluster stays connected.
fn ring(cx: f64, cy: f64, radius: f64, n: usize, phase: f64) -> Vec<Disc> {
    const SPACING: f64 = 1.7;
    let k = SPACING / (2.0 * (PI / n as f64).sin());
    let r = radius / (1.0 + k);
    let ring_r = k * r;
    (0..n)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / n as f64;
            Disc {
                cx: cx + ring_r * a.cos(),
                cy: cy + ring_r * a.sin(),
                r,
            }
        })
        .collect()
}

/// Draws a frame: bright organisms on a dark background with additive
/// Gaussian noise. Deterministic in `(truth, cfg)`.
pub fn render_frame(truth: &FrameTruth, cfg: &RenderConfig) -> Result<RenderedFrame> {
    if cfg.width == 0 || cfg.height == 0 {
        return Err(Error::InvalidArgument("render dimensions must be positive".into()));
    }
    let mut canvas = vec![cfg.background as f64; cfg.width as usize * cfg.height as usize];
    let seed = cfg.seed ^ truth.frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (cfg.width as f64, cfg.height as f64);
    let fg = cfg.foreground as f64;
    let mut clipped = Vec::new();

    for (i, gt) in truth.boxes.iter().enumerate() {
        let b = gt.bbox;
        if b.x_min <= 0.0 || b.y_min <= 0.0 || b.x_max >= 1.0 || b.y_max >= 1.0 {
            clipped.push(i);
        }
        let m = morphology(
            gt.label,
            b.x_min * wf,
            b.y_min * hf,
            b.x_max * wf,
            b.y_max * hf,
            &mut rng,
        );
        match m {
            Morphology::Discs(discs) => {
                for (cx, cy, r) in discs {
                    paint(&mut canvas, cfg, cx - r, cy - r, cx + r, cy + r, |x, y| {
                        let (dx, dy) = (x - cx, y - cy);
                        (dx * dx + dy * dy <= r * r).then_some(fg)
                    });
                }
            }
            Morphology::Ellipse { cx, cy, a, b } => {
                paint(&mut canvas, cfg, cx - a, cy - b, cx + a, cy + b, |x, y| {
                    let (u, v) = ((x - cx) / a, (y - cy) / b);
                    (u * u + v * v <= 1.0).then_some(fg)
                });
            }
        }
    }

    let peak = cfg.blurred_peak as f64 - cfg.background as f64;
    for b in &truth.blurred {
        let (cx, cy) = ((b.x_min + b.x_max) / 2.0 * wf, (b.y_min + b.y_max) / 2.0 * hf);
        let (a, bb) = (b.width() * wf / 2.0, b.height() * hf / 2.0);
        // Soft logistic edge; the blur scale is drawn per individual.
        let soft = rng.random_range(0.15..0.35);
        let bg = cfg.background as f64;
        paint(
            &mut canvas,
            cfg,
            cx - 2.0 * a,
            cy - 2.0 * bb,
            cx + 2.0 * a,
            cy + 2.0 * bb,
            |x, y| {
                let (u, v) = ((x - cx) / a, (y - cy) / bb);
                let rho = (u * u + v * v).sqrt();
                Some(bg + peak / (1.0 + ((rho - 1.0) / soft).exp()))
            },
        );
    }

    if cfg.noise_sigma > 0.0 {
        let noise =
            Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
        for v in &mut canvas {
            *v += noise.sample(&mut rng);
        }
    }
    let data = canvas.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Ok(RenderedFrame {
        image: GrayImage::from_raw(cfg.width, cfg.height, data)?,
        clipped,
    })
}

/// Max-composites `shade` over the pixel rectangle covering the given extent.
/// Pixel centers sit at half-integer coordinates.
fn paint<F>(canvas: &mut [f64], cfg: &RenderConfig, x0: f64, y0: f64, x1: f64, y1: f64, shade: F)
where
    F: Fn(f64, f64) -> Option<f64>,
{
    let w = cfg.width as i64;
    let h = cfg.height as i64;
    let px0 = (x0.floor() as i64).clamp(0, w);
    let px1 = (x1.ceil() as i64).clamp(0, w);
    let py0 = (y0.floor() as i64).clamp(0, h);
    let py1 = (y1.ceil() as i64).clamp(0, h);
    for py in py0..py1 {
        for px in px0..px1 {
            if let Some(v) = shade(px as f64 + 0.5, py as f64 + 0.5) {
                let idx = (py * w + px) as usize;
                if v > canvas[idx] {
                    canvas[idx] = v;
                }
            }
        }
    }
}

/// One 8-connected foreground region.
#[derive(Debug, Clone)]
pub struct Component {
    /// Pixel coordinates `(x, y)`.
    pub pixels: Vec<(u32, u32)>,
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn bbox_width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn bbox_height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    /// Local binary mask over the bounding box padded by one background pixel.
    pub fn mask(&self) -> (usize, usize, Vec<bool>) {
        let w = self.bbox_width() as usize + 2;
        let h = self.bbox_height() as usize + 2;
        let mut m = vec![false; w * h];
        for &(x, y) in &self.pixels {
            let lx = (x - self.x_min) as usize + 1;
            let ly = (y - self.y_min) as usize + 1;
            m[ly * w + lx] = true;
        }
        (w, h, m)
    }

    /// Major/minor axis ratio from second central moments.
    pub fn elongation(&self) -> f64 {
        let n = self.pixels.len() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(x, y) in &self.pixels {
            sx += x as f64;
            sy += y as f64;
        }
        let (mx, my) = (sx / n, sy / n);
        let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
        for &(x, y) in &self.pixels {
            let (dx, dy) = (x as f64 - mx, y as f64 - my);
            cxx += dx * dx;
            cyy += dy * dy;
            cxy += dx * dy;
        }
        // Add the variance of a unit pixel so single rows are not degenerate.
        let (cxx, cyy, cxy) = (cxx / n + 1.0 / 12.0, cyy / n + 1.0 / 12.0, cxy / n);
        let tr = cxx + cyy;
        let disc = ((cxx - cyy).powi(2) + 4.0 * cxy * cxy).sqrt();
        let l1 = (tr + disc) / 2.0;
        let l2 = ((tr - disc) / 2.0).max(1e-12);
        (l1 / l2).sqrt()
    }

    /// Area over convex-hull area, in (0, 1].
    pub fn solidity(&self) -> f64 {
        // Hull over pixel corners so a single pixel has area 1.
        let mut pts: Vec<(i64, i64)> = Vec::with_capacity(self.pixels.len() * 4);
        for &(x, y) in &self.pixels {
            let (x, y) = (x as i64, y as i64);
            pts.extend_from_slice(&[(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]);
        }
        let hull = convex_hull(pts);
        let mut twice = 0i64;
        for i in 0..hull.len() {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            twice += a.0 * b.1 - b.0 * a.1;
        }
        let hull_area = twice.abs() as f64 / 2.0;
        if hull_area <= 0.0 {
            return 1.0;
        }
        (self.area() as f64 / hull_area).min(1.0)
    }
}

fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// 8-connected components of pixels strictly brighter than `threshold`.
pub fn connected_components(img: &GrayImage, threshold: u8) -> Vec<Component> {
    let (w, h) = (img.width as usize, img.height as usize);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || img.data[start] <= threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let (mut x_min, mut y_min, mut x_max, mut y_max) = (u32::MAX, u32::MAX, 0, 0);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            pixels.push((x as u32, y as u32));
            x_min = x_min.min(x as u32);
            y_min = y_min.min(y as u32);
            x_max = x_max.max(x as u32);
            y_max = y_max.max(y as u32);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && img.data[q] > threshold {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(Component {
            pixels,
            x_min,
            y_min,
            x_max,
            y_max,
        });
    }
    out
}

/// Exact Euclidean distance from each foreground cell to the nearest
/// background cell (Felzenszwalb–Huttenlocher separable transform).
pub fn distance_transform(w: usize, h: usize, mask: &[bool]) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { INF } else { 0.0 }).collect();
    let mut f = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    for x in 0..w {
        for y in 0..h {
            f[y] = d[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h]);
        for y in 0..h {
            d[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&d[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w]);
        d[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    d.into_iter().map(f64::sqrt).collect()
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never steps below zero.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Mean Sobel gradient magnitude (per-pixel intensity units) over the
/// component's boundary pixels.
pub fn boundary_sharpness(img: &GrayImage, comp: &Component) -> f64 {
    let (w, h, mask) = comp.mask();
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(x, y) in &comp.pixels {
        let lx = (x - comp.x_min) as usize + 1;
        let ly = (y - comp.y_min) as usize + 1;
        let edge =
            !mask[ly * w + lx - 1] || !mask[ly * w + lx + 1] || !mask[(ly - 1) * w + lx] || !mask[(ly + 1) * w + lx];
        let _ = h;
        if edge {
            sum += sobel(img, x, y);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn sobel(img: &GrayImage, x: u32, y: u32) -> f64 {
    let at = |dx: i64, dy: i64| {
        let xx = (x as i64 + dx).clamp(0, img.width as i64 - 1) as u32;
        let yy = (y as i64 + dy).clamp(0, img.height as i64 - 1) as u32;
        img.get(xx, yy) as f64
    };
    let gx = (at(1, -1) + 2.0 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2.0 * at(-1, 0) + at(-1, 1));
    let gy = (at(-1, 1) + 2.0 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2.0 * at(0, -1) + at(1, -1));
    (gx * gx + gy * gy).sqrt() / 8.0
}
