//! Lightweight trainable detector: boosted lookup tables over pooled
//! window features, per class and per modality.
//!
//! Inference runs a cheap center/surround contrast cascade over a window
//! pyramid, keeps the strongest few candidates per scale, and describes
//! each by a normalized appearance grid, a luma histogram and its contrast.
//! A class scores a window as `sigmoid(F / 2)`, where `F` sums one binned
//! lookup per weak learner; windows at or above the class threshold
//! survive NMS as detections.
//!
//! Parameters split into a frozen part ([`FeatureStats`]: channel
//! normalization, histogram bin edges, polarity) and a tunable part
//! ([`ClassModel`]: weak learners and threshold).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geom::{iou, nms, BBox, GeomError, ScoredBox};
use crate::math;
use crate::raster::{Modality, RasterImage};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectorError {
    #[error("modality mismatch: model has no {0:?} parameters")]
    ModalityMismatch(Modality),
    #[error("nothing to learn: no positive labels")]
    NothingToLearn,
    #[error("bad parameter blob: {0}")]
    BadBlob(&'static str),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Deployed detector as seen by the edge.
pub trait DetectorModel {
    fn version(&self) -> u64;
    fn supports(&self, modality: Modality) -> bool;
    fn infer(&self, image: &RasterImage) -> Result<Vec<ScoredBox>, DetectorError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    pub hist_bins: usize,
    /// Window heights of the pyramid, in pixels.
    pub window_heights: Vec<u32>,
    /// Window width / height.
    pub aspect: f64,
    /// Stride as a fraction of window height, never below `min_stride`.
    pub stride_frac: f64,
    pub min_stride: u32,
    /// Minimum polarity-signed center/surround contrast, in std units.
    pub contrast_floor: f64,
    /// Candidate budget per image, shared equally between scales.
    pub max_candidates: usize,
    /// Unlabelled candidates per training image used as negatives.
    pub negatives_per_image: usize,
    pub boost_rounds: usize,
    /// Lookup-table bins per weak learner.
    pub boost_bins: usize,
    pub nms_iou: f64,
    /// Fraction of training negatives allowed to fire when calibrating the
    /// threshold.
    pub target_negative_rate: f64,
    pub min_threshold: f64,
    pub max_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid_w: 4,
            grid_h: 6,
            hist_bins: 8,
            window_heights: vec![4, 5, 7, 9, 12, 16, 21, 28, 36],
            aspect: 0.75,
            stride_frac: 0.25,
            min_stride: 2,
            contrast_floor: 0.2,
            max_candidates: 144,
            negatives_per_image: 144,
            boost_rounds: 48,
            boost_bins: 16,
            nms_iou: 0.3,
            target_negative_rate: 0.01,
            min_threshold: 0.5,
            max_threshold: 0.999,
        }
    }
}

/// Frozen feature statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    /// Interior bin edges (`hist_bins - 1` values) over normalized luma.
    pub hist_edges: Vec<f64>,
    /// +1 when objects are brighter than their surroundings, -1 when darker.
    pub polarity: f64,
}

/// Tunable per-class parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub label: String,
    pub learners: Vec<WeakLearner>,
    pub threshold: f64,
}

/// Piecewise-constant response of one feature: `table[k]` applies when
/// exactly `k` edges are at or below the feature value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLearner {
    pub feature: usize,
    pub edges: Vec<f64>,
    pub table: Vec<f64>,
}

impl WeakLearner {
    fn bin(&self, v: f64) -> usize {
        self.edges.partition_point(|e| *e <= v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityParams {
    pub features: FeatureStats,
    pub classes: Vec<ClassModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorParams {
    pub version: u64,
    pub config: DetectorConfig,
    pub rgb: Option<ModalityParams>,
    pub thermal: Option<ModalityParams>,
}

impl ToyDetectorParams {
    pub fn untrained(config: DetectorConfig) -> Self {
        Self { version: 0, config, rgb: None, thermal: None }
    }

    pub fn modality(&self, m: Modality) -> Option<&ModalityParams> {
        match m {
            Modality::Rgb => self.rgb.as_ref(),
            Modality::Thermal => self.thermal.as_ref(),
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut Option<ModalityParams> {
        match m {
            Modality::Rgb => &mut self.rgb,
            Modality::Thermal => &mut self.thermal,
        }
    }
}

/// Integral images of the normalized channels, normalized luma and
/// horizontal/vertical luma gradient magnitude.
pub struct FeatureMap<'a> {
    cfg: &'a DetectorConfig,
    stats: &'a FeatureStats,
    width: usize,
    height: usize,
    channels: usize,
    /// `channels + 3` planes of `(width + 1) * (height + 1)` corners:
    /// channels, luma, |dx|, |dy|.
    integrals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Window {
    pub fn bbox(&self) -> BBox {
        // w, h >= 1 by construction
        BBox::from_xywh(f64::from(self.x), f64::from(self.y), f64::from(self.w), f64::from(self.h))
            .unwrap_or_else(|_| unreachable!())
    }
}

/// Feature vector of one window. Layout: mirror-symmetric and
/// mirror-antisymmetric (absolute) parts of the normalized color grid, the
/// symmetric part of the gradient grid, the luma histogram, and the
/// cascade contrast. Folding columns makes the features invariant to the
/// object facing left or right.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFeatures {
    pub values: Vec<f64>,
}

impl WindowFeatures {
    pub fn dim(cfg: &DetectorConfig, channels: usize) -> usize {
        let (half_up, half_down) = (cfg.grid_w.div_ceil(2), cfg.grid_w / 2);
        cfg.grid_h * ((half_up + half_down) * channels + half_up * 2) + cfg.hist_bins.max(2) + 1
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }
}

fn luma_weights(channels: usize) -> &'static [f64] {
    if channels == 3 {
        &[0.299, 0.587, 0.114]
    } else {
        &[1.0]
    }
}

impl<'a> FeatureMap<'a> {
    pub fn new(cfg: &'a DetectorConfig, stats: &'a FeatureStats, image: &RasterImage) -> Self {
        let (w, h, c) = (image.width() as usize, image.height() as usize, image.channels() as usize);
        let planes = c + 3;
        let n = w * h;
        let px = image.pixels();
        let lw = luma_weights(c);
        // Plane-major pixel values: channels, luma, |dx|, |dy|.
        let mut values = vec![0.0; n * planes];
        for ch in 0..c {
            let (mean, inv) = (stats.channel_mean[ch], 1.0 / stats.channel_std[ch].max(1e-6));
            let (before, rest) = values.split_at_mut(c * n);
            let (plane, luma) = (&mut before[ch * n..(ch + 1) * n], &mut rest[..n]);
            for ((v, l), p) in plane.iter_mut().zip(luma.iter_mut()).zip(px.iter().skip(ch).step_by(c)) {
                *v = (f64::from(*p) - mean) * inv;
                *l += lw[ch] * *v;
            }
        }
        {
            let (head, grads) = values.split_at_mut((c + 1) * n);
            let luma = &head[c * n..];
            let (gx, gy) = grads.split_at_mut(n);
            for y in 0..h {
                let row = &luma[y * w..(y + 1) * w];
                let up = &luma[y.saturating_sub(1) * w..][..w];
                let down = &luma[(y + 1).min(h - 1) * w..][..w];
                for x in 0..w {
                    gx[y * w + x] = 0.5 * (row[(x + 1).min(w - 1)] - row[x.saturating_sub(1)]).abs();
                    gy[y * w + x] = 0.5 * (down[x] - up[x]).abs();
                }
            }
        }
        let w1 = w + 1;
        let stride = w1 * (h + 1);
        let mut integrals = vec![0.0; stride * planes];
        for p in 0..planes {
            let src = &values[p * n..(p + 1) * n];
            let dst = &mut integrals[p * stride..(p + 1) * stride];
            for y in 0..h {
                let mut acc = 0.0;
                let (above, below) = dst.split_at_mut((y + 1) * w1);
                let prev = &above[y * w1..];
                let cur = &mut below[..w1];
                for x in 0..w {
                    acc += src[y * w + x];
                    cur[x + 1] = prev[x + 1] + acc;
                }
            }
        }
        Self { cfg, stats, width: w, height: h, channels: c, integrals }
    }

    #[inline]
    fn box_sum(&self, plane: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let w1 = self.width + 1;
        let p = &self.integrals[plane * w1 * (self.height + 1)..];
        p[y1 * w1 + x1] - p[y0 * w1 + x1] - p[y1 * w1 + x0] + p[y0 * w1 + x0]
    }

    fn box_mean(&self, plane: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let area = ((x1 - x0) * (y1 - y0)) as f64;
        self.box_sum(plane, x0, y0, x1, y1) / area
    }

    /// Polarity-signed difference between the mean luma of the window's
    /// central half and the mean luma of a ring around the whole window.
    pub fn contrast(&self, win: &Window) -> f64 {
        let (x0, y0) = (win.x as usize, win.y as usize);
        let (x1, y1) = (x0 + win.w as usize, y0 + win.h as usize);
        let m = (win.h as usize / 3).max(1);
        let (ox0, oy0) = (x0.saturating_sub(m), y0.saturating_sub(m));
        let (ox1, oy1) = ((x1 + m).min(self.width), (y1 + m).min(self.height));
        let (cx0, cy0) = (x0 + win.w as usize / 4, y0 + win.h as usize / 4);
        let (cx1, cy1) = ((x1 - win.w as usize / 4).max(cx0 + 1), (y1 - win.h as usize / 4).max(cy0 + 1));
        let luma = self.channels;
        let core = self.box_mean(luma, cx0, cy0, cx1, cy1);
        let inner = self.box_sum(luma, x0, y0, x1, y1);
        let outer = self.box_sum(luma, ox0, oy0, ox1, oy1);
        let inner_area = ((x1 - x0) * (y1 - y0)) as f64;
        let ring_area = ((ox1 - ox0) * (oy1 - oy0)) as f64 - inner_area;
        if ring_area <= 0.0 {
            return 0.0;
        }
        self.stats.polarity * (core - (outer - inner) / ring_area)
    }

    fn cell_edges(start: usize, len: usize, cells: usize, limit: usize) -> Vec<(usize, usize)> {
        (0..cells)
            .map(|i| {
                let a = start + i * len / cells;
                let b = (start + (i + 1) * len / cells).max(a + 1).min(limit);
                (a.min(limit - 1), b)
            })
            .collect()
    }

    pub fn features(&self, win: &Window) -> WindowFeatures {
        let (gw, gh, c) = (self.cfg.grid_w, self.cfg.grid_h, self.channels);
        let xs = Self::cell_edges(win.x as usize, win.w as usize, gw, self.width);
        let ys = Self::cell_edges(win.y as usize, win.h as usize, gh, self.height);
        let mut color = Vec::with_capacity(gw * gh * c);
        let mut grad = Vec::with_capacity(gw * gh * 2);
        let mut lumas = Vec::with_capacity(gw * gh);
        for &(y0, y1) in &ys {
            for &(x0, x1) in &xs {
                for ch in 0..c {
                    color.push(self.box_mean(ch, x0, y0, x1, y1));
                }
                lumas.push(self.box_mean(c, x0, y0, x1, y1));
                grad.push(self.box_mean(c + 1, x0, y0, x1, y1));
                grad.push(self.box_mean(c + 2, x0, y0, x1, y1));
            }
        }
        let color = normalize_zero_mean(color);
        let energy: f64 = grad.iter().sum::<f64>() / grad.len() as f64;
        if energy > 1e-9 {
            grad.iter_mut().for_each(|g| *g /= energy);
        }
        let mut values = Vec::with_capacity(WindowFeatures::dim(self.cfg, c));
        let (half_up, half_down) = (gw.div_ceil(2), gw / 2);
        for j in 0..gh {
            let cell = |i: usize, k: usize, per: usize, v: &[f64]| v[(j * gw + i) * per + k];
            for i in 0..half_up {
                for k in 0..c {
                    values.push(0.5 * (cell(i, k, c, &color) + cell(gw - 1 - i, k, c, &color)));
                }
            }
            for i in 0..half_down {
                for k in 0..c {
                    values.push((cell(i, k, c, &color) - cell(gw - 1 - i, k, c, &color)).abs());
                }
            }
            for i in 0..half_up {
                for k in 0..2 {
                    values.push(0.5 * (cell(i, k, 2, &grad) + cell(gw - 1 - i, k, 2, &grad)));
                }
            }
        }
        let mut hist = vec![0.0; self.stats.hist_edges.len() + 1];
        for l in &lumas {
            let bin = self.stats.hist_edges.iter().take_while(|e| *l >= **e).count();
            hist[bin] += 1.0;
        }
        let n = lumas.len() as f64;
        values.extend(hist.iter().map(|v| v / n));
        values.push(self.contrast(win));
        WindowFeatures { values }
    }

    /// Window size and stride for one pyramid height, if it fits.
    fn scale(&self, h: u32) -> Option<(u32, u32, u32)> {
        let w = (math::round(f64::from(h) * self.cfg.aspect) as u32).max(1);
        if h as usize > self.height || w as usize > self.width {
            return None;
        }
        let stride = (math::round(f64::from(h) * self.cfg.stride_frac) as u32).max(self.cfg.min_stride).max(1);
        Some((w, h, stride))
    }

    fn scale_windows(&self, w: u32, h: u32, stride: u32) -> impl Iterator<Item = Window> + '_ {
        let (iw, ih) = (self.width as u32, self.height as u32);
        (0..=(ih - h) / stride).flat_map(move |j| (0..=(iw - w) / stride).map(move |i| Window { x: i * stride, y: j * stride, w, h }))
    }

    /// Every pyramid window that fits the image.
    pub fn windows(&self) -> Vec<Window> {
        self.cfg
            .window_heights
            .iter()
            .filter_map(|&h| self.scale(h))
            .flat_map(|(w, h, stride)| self.scale_windows(w, h, stride).collect::<Vec<_>>())
            .collect()
    }

    /// Cascade: contrast floor, then the strongest windows of each scale
    /// with limited mutual overlap. Each scale gets an equal share of
    /// `max_candidates` so large, high-contrast scenery cannot crowd out
    /// small objects.
    pub fn candidates(&self) -> Vec<Window> {
        let scales = self.cfg.window_heights.len().max(1);
        let quota = self.cfg.max_candidates.div_ceil(scales);
        let mut kept: Vec<Window> = Vec::new();
        let mut scored: Vec<(f64, Window)> = Vec::new();
        for &h in &self.cfg.window_heights {
            let Some((w, h, stride)) = self.scale(h) else { continue };
            scored.clear();
            scored.extend(self.scale_windows(w, h, stride).filter_map(|win| {
                let c = self.contrast(&win);
                (c >= self.cfg.contrast_floor).then_some((c, win))
            }));
            let by_contrast = |a: &(f64, Window), b: &(f64, Window)| {
                b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then((a.1.y, a.1.x).cmp(&(b.1.y, b.1.x)))
            };
            let pool = (16 * quota).min(scored.len());
            if pool < scored.len() {
                scored.select_nth_unstable_by(pool, by_contrast);
                scored.truncate(pool);
            }
            scored.sort_by(by_contrast);
            let start = kept.len();
            for (_, win) in &scored {
                if kept.len() - start >= quota {
                    break;
                }
                let b = win.bbox();
                if kept[start..].iter().all(|k| iou(&k.bbox(), &b) < 0.5) {
                    kept.push(*win);
                }
            }
        }
        kept
    }

    /// Window covering `b`, snapped to whole pixels inside the image.
    pub fn window_for(&self, b: &BBox) -> Option<Window> {
        let x0 = math::round(b.x_min()).clamp(0.0, self.width as f64 - 1.0) as u32;
        let y0 = math::round(b.y_min()).clamp(0.0, self.height as f64 - 1.0) as u32;
        let x1 = (math::round(b.x_max()).clamp(0.0, self.width as f64) as u32).max(x0 + 1);
        let y1 = (math::round(b.y_max()).clamp(0.0, self.height as f64) as u32).max(y0 + 1);
        Some(Window { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }
}

fn normalize_zero_mean(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = math::sqrt(v.iter().map(|x| x * x).sum());
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn score_window(f: &WindowFeatures, class: &ClassModel) -> f64 {
    class_score(&f.values, class)
}

fn class_score(x: &[f64], class: &ClassModel) -> f64 {
    let margin: f64 = class.learners.iter().map(|l| l.table[l.bin(x[l.feature])]).sum();
    1.0 / (1.0 + math::exp(-0.5 * margin))
}

/// Immutable, deployable detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    params: ToyDetectorParams,
}

impl ToyDetector {
    pub fn new(params: ToyDetectorParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ToyDetectorParams {
        &self.params
    }

    /// Best score per class for every cascade candidate, without
    /// thresholding.
    pub fn raw_scores(&self, image: &RasterImage) -> Result<Vec<(Window, Vec<f64>)>, DetectorError> {
        let m = image.modality();
        let mp = self.params.modality(m).ok_or(DetectorError::ModalityMismatch(m))?;
        let fm = FeatureMap::new(&self.params.config, &mp.features, image);
        Ok(fm
            .candidates()
            .into_iter()
            .map(|w| {
                let f = fm.features(&w);
                (w, mp.classes.iter().map(|c| score_window(&f, c)).collect())
            })
            .collect())
    }
}

impl ToyDetector {
    /// Detections after NMS. With `floor` set, every window scoring at
    /// least `floor` counts instead of applying the class thresholds.
    /// Greedy NMS commutes with a score cut, so filtering the floor output
    /// at a class threshold reproduces [`DetectorModel::infer`].
    pub fn detect(&self, image: &RasterImage, floor: Option<f64>) -> Result<Vec<ScoredBox>, DetectorError> {
        let m = image.modality();
        let mp = self.params.modality(m).ok_or(DetectorError::ModalityMismatch(m))?;
        let mut dets = Vec::new();
        for (w, scores) in self.raw_scores(image)? {
            for (class, s) in mp.classes.iter().zip(scores) {
                if s >= floor.unwrap_or(class.threshold) {
                    dets.push(ScoredBox::new(w.bbox(), class.label.clone(), s)?);
                }
            }
        }
        Ok(nms(&dets, self.params.config.nms_iou)?)
    }
}

impl DetectorModel for ToyDetector {
    fn version(&self) -> u64 {
        self.params.version
    }

    fn supports(&self, modality: Modality) -> bool {
        self.params.modality(modality).is_some()
    }

    fn infer(&self, image: &RasterImage) -> Result<Vec<ScoredBox>, DetectorError> {
        self.detect(image, None)
    }
}

/// One training image with its (possibly empty) labels.
#[derive(Debug, Clone)]
pub struct TrainingImage<'a> {
    pub image: &'a RasterImage,
    pub labels: &'a [ScoredBox],
}

/// Channel statistics, histogram edges and polarity from training data.
pub fn fit_feature_stats(cfg: &DetectorConfig, data: &[TrainingImage<'_>]) -> Result<FeatureStats, DetectorError> {
    let channels = data.first().ok_or(DetectorError::NothingToLearn)?.image.channels() as usize;
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    let mut n = 0.0;
    for t in data {
        for px in t.image.pixels().chunks_exact(channels) {
            for ch in 0..channels {
                let v = f64::from(px[ch]);
                sum[ch] += v;
                sq[ch] += v * v;
            }
            n += 1.0;
        }
    }
    let channel_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let channel_std: Vec<f64> =
        sq.iter().zip(&channel_mean).map(|(q, m)| math::sqrt((q / n - m * m).max(0.0)).max(1.0)).collect();
    let provisional = FeatureStats {
        channel_mean: channel_mean.clone(),
        channel_std: channel_std.clone(),
        hist_edges: Vec::new(),
        polarity: 1.0,
    };
    // Polarity and luma distribution of labelled objects.
    let mut contrast_sum = 0.0;
    let mut lumas: Vec<f64> = Vec::new();
    for t in data {
        let fm = FeatureMap::new(cfg, &provisional, t.image);
        for l in t.labels {
            let Some(w) = fm.window_for(&l.bbox) else { continue };
            contrast_sum += fm.contrast(&w);
            let xs = FeatureMap::cell_edges(w.x as usize, w.w as usize, cfg.grid_w, fm.width);
            let ys = FeatureMap::cell_edges(w.y as usize, w.h as usize, cfg.grid_h, fm.height);
            for &(y0, y1) in &ys {
                for &(x0, x1) in &xs {
                    lumas.push(fm.box_mean(fm.channels, x0, y0, x1, y1));
                }
            }
        }
    }
    if lumas.is_empty() {
        return Err(DetectorError::NothingToLearn);
    }
    lumas.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let bins = cfg.hist_bins.max(2);
    let hist_edges = (1..bins).map(|i| lumas[(i * lumas.len() / bins).min(lumas.len() - 1)]).collect();
    Ok(FeatureStats { channel_mean, channel_std, hist_edges, polarity: if contrast_sum < 0.0 { -1.0 } else { 1.0 } })
}

fn quantile_edges(mut values: Vec<f64>, bins: usize) -> Vec<f64> {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut edges: Vec<f64> = (1..bins).map(|k| values[k * (values.len() - 1) / bins]).collect();
    edges.dedup();
    edges
}

/// Fits one class by real AdaBoost over lookup-table weak learners.
/// Positives are the labelled windows of `label` plus cascade candidates
/// overlapping them at IoU >= 0.5; negatives are candidates that touch no
/// label and windows of other labels. Every fifth image (once there are at
/// least ten) is held out from fitting; the threshold is the smallest value
/// at which at most `target_negative_rate` of held-out images would fire
/// outside their labels.
pub fn fit_class(
    cfg: &DetectorConfig,
    features: &FeatureStats,
    label: &str,
    data: &[TrainingImage<'_>],
) -> Result<ClassModel, DetectorError> {
    let dim = WindowFeatures::dim(cfg, features.channel_mean.len());
    let held_out = |i: usize| data.len() >= 10 && i % 5 == 4;
    let mut rows: Vec<f64> = Vec::new();
    let mut positive: Vec<bool> = Vec::new();
    for t in data.iter().enumerate().filter(|(i, _)| !held_out(*i)).map(|(_, t)| t) {
        let fm = FeatureMap::new(cfg, features, t.image);
        for l in t.labels {
            let Some(w) = fm.window_for(&l.bbox) else { continue };
            rows.extend(fm.features(&w).iter());
            positive.push(l.label == label);
        }
        let mut background = Vec::new();
        for w in fm.candidates() {
            let b = w.bbox();
            if t.labels.iter().any(|l| l.label == label && iou(&b, &l.bbox) >= 0.5) {
                rows.extend(fm.features(&w).iter());
                positive.push(true);
            } else if t.labels.iter().all(|l| b.intersection_area(&l.bbox) == 0.0) {
                background.push(w);
            }
        }
        let keep = cfg.negatives_per_image.min(background.len());
        for k in 0..keep {
            rows.extend(fm.features(&background[k * background.len() / keep]).iter());
            positive.push(false);
        }
    }
    let n = positive.len();
    let n_pos = positive.iter().filter(|p| **p).count();
    if n_pos == 0 {
        return Err(DetectorError::NothingToLearn);
    }
    let bins = cfg.boost_bins.clamp(2, 256);
    let sample_step = (n / 4096).max(1);
    let mut edges = Vec::with_capacity(dim);
    let mut binned = vec![0u8; n * dim];
    for j in 0..dim {
        let e = quantile_edges((0..n).step_by(sample_step).map(|i| rows[i * dim + j]).collect(), bins);
        for i in 0..n {
            binned[j * n + i] = e.partition_point(|x| *x <= rows[i * dim + j]) as u8;
        }
        edges.push(e);
    }
    drop(rows);

    let n_neg = n - n_pos;
    let mut weight: Vec<f64> = positive
        .iter()
        .map(|p| if *p { 0.5 / n_pos as f64 } else { 0.5 / n_neg.max(1) as f64 })
        .collect();
    let smoothing = 1.0 / n as f64;
    let mut learners = Vec::with_capacity(cfg.boost_rounds);
    let (mut wp, mut wn) = (vec![0.0; bins], vec![0.0; bins]);
    for _ in 0..cfg.boost_rounds {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for j in 0..dim {
            wp.iter_mut().for_each(|v| *v = 0.0);
            wn.iter_mut().for_each(|v| *v = 0.0);
            let col = &binned[j * n..(j + 1) * n];
            for i in 0..n {
                if positive[i] {
                    wp[col[i] as usize] += weight[i];
                } else {
                    wn[col[i] as usize] += weight[i];
                }
            }
            let z: f64 = wp.iter().zip(&wn).map(|(a, b)| math::sqrt(a * b)).sum();
            if best.as_ref().is_none_or(|(bz, _, _)| z < *bz) {
                let table = (0..=edges[j].len())
                    .map(|k| 0.5 * math::ln((wp[k] + smoothing) / (wn[k] + smoothing)))
                    .collect();
                best = Some((z, j, table));
            }
        }
        let Some((_, j, table)) = best else { break };
        let col = &binned[j * n..(j + 1) * n];
        let mut total = 0.0;
        for i in 0..n {
            let h = table[col[i] as usize];
            weight[i] *= math::exp(if positive[i] { -h } else { h });
            total += weight[i];
        }
        weight.iter_mut().for_each(|w| *w /= total);
        learners.push(WeakLearner { feature: j, edges: edges[j].clone(), table });
    }
    let mut model = ClassModel { label: label.into(), learners, threshold: cfg.max_threshold };

    // Highest score per held-out image over candidates that avoid every
    // label.
    let mut negative_scores: Vec<f64> = data
        .iter()
        .enumerate()
        .filter(|(i, _)| held_out(*i) || data.len() < 10)
        .map(|(_, t)| {
            let fm = FeatureMap::new(cfg, features, t.image);
            fm.candidates()
                .into_iter()
                .filter(|w| {
                    let b = w.bbox();
                    t.labels.iter().all(|l| b.intersection_area(&l.bbox) == 0.0)
                })
                .map(|w| score_window(&fm.features(&w), &model))
                .fold(0.0f64, f64::max)
        })
        .collect();
    negative_scores.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let allowed = math::floor(cfg.target_negative_rate * negative_scores.len() as f64) as usize;
    let threshold = match negative_scores.get(allowed) {
        Some(s) => s + 1e-6,
        None => cfg.min_threshold,
    };
    model.threshold = threshold.clamp(cfg.min_threshold, cfg.max_threshold);
    Ok(model)
}

const BLOB_MAGIC: &[u8; 8] = b"RADSTOYD";
const BLOB_FORMAT: u16 = 1;

struct BlobWriter(Vec<f64>);

impl BlobWriter {
    fn num(&mut self, v: f64) {
        self.0.push(v);
    }
    fn list(&mut self, v: &[f64]) {
        self.0.push(v.len() as f64);
        self.0.extend_from_slice(v);
    }
    fn text(&mut self, s: &str) {
        self.0.push(s.len() as f64);
        self.0.extend(s.bytes().map(f64::from));
    }
    fn learners(&mut self, ls: &[WeakLearner]) {
        self.num(ls.len() as f64);
        for l in ls {
            self.num(l.feature as f64);
            self.list(&l.edges);
            self.list(&l.table);
        }
    }
    fn modality(&mut self, m: Option<&ModalityParams>) {
        let Some(m) = m else {
            self.num(0.0);
            return;
        };
        self.num(1.0);
        self.list(&m.features.channel_mean);
        self.list(&m.features.channel_std);
        self.list(&m.features.hist_edges);
        self.num(m.features.polarity);
        self.num(m.classes.len() as f64);
        for c in &m.classes {
            self.text(&c.label);
            self.learners(&c.learners);
            self.num(c.threshold);
        }
    }
}

struct BlobReader<'a>(&'a [f64], usize);

impl BlobReader<'_> {
    fn num(&mut self) -> Result<f64, DetectorError> {
        let v = *self.0.get(self.1).ok_or(DetectorError::BadBlob("truncated"))?;
        self.1 += 1;
        Ok(v)
    }
    fn count(&mut self) -> Result<usize, DetectorError> {
        let v = self.num()?;
        if !(v >= 0.0 && v <= (self.0.len() - self.1) as f64 + 1.0) || math::floor(v) != v {
            return Err(DetectorError::BadBlob("bad length"));
        }
        Ok(v as usize)
    }
    fn list(&mut self) -> Result<Vec<f64>, DetectorError> {
        let n = self.count()?;
        let end = self.1.checked_add(n).filter(|e| *e <= self.0.len()).ok_or(DetectorError::BadBlob("truncated"))?;
        let out = self.0[self.1..end].to_vec();
        self.1 = end;
        Ok(out)
    }
    fn text(&mut self) -> Result<String, DetectorError> {
        let bytes: Vec<u8> = self.list()?.into_iter().map(|b| b as u8).collect();
        String::from_utf8(bytes).map_err(|_| DetectorError::BadBlob("label not utf-8"))
    }
    fn learners(&mut self, dim: usize) -> Result<Vec<WeakLearner>, DetectorError> {
        let n = self.count()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let feature = self.num()?;
            if !(feature >= 0.0 && feature < dim as f64 && math::floor(feature) == feature) {
                return Err(DetectorError::BadBlob("feature index out of range"));
            }
            let edges = self.list()?;
            let table = self.list()?;
            if table.len() != edges.len() + 1 {
                return Err(DetectorError::BadBlob("table size does not match edges"));
            }
            out.push(WeakLearner { feature: feature as usize, edges, table });
        }
        Ok(out)
    }
    fn modality(&mut self, cfg: &DetectorConfig) -> Result<Option<ModalityParams>, DetectorError> {
        if self.num()? == 0.0 {
            return Ok(None);
        }
        let features = FeatureStats {
            channel_mean: self.list()?,
            channel_std: self.list()?,
            hist_edges: self.list()?,
            polarity: self.num()?,
        };
        let dim = WindowFeatures::dim(cfg, features.channel_mean.len());
        let n = self.count()?;
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let label = self.text()?;
            let learners = self.learners(dim)?;
            classes.push(ClassModel { label, learners, threshold: self.num()? });
        }
        Ok(Some(ModalityParams { features, classes }))
    }
}

impl ToyDetectorParams {
    /// `RADSTOYD`, u16 format version (LE), then a little-endian f64 array.
    /// Strings are stored as a length followed by one value per UTF-8 byte.
    pub fn to_blob(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = BlobWriter(Vec::new());
        w.num(self.version as f64);
        w.num(c.grid_w as f64);
        w.num(c.grid_h as f64);
        w.num(c.hist_bins as f64);
        w.list(&c.window_heights.iter().map(|h| f64::from(*h)).collect::<Vec<_>>());
        w.num(c.aspect);
        w.num(c.stride_frac);
        w.num(f64::from(c.min_stride));
        w.num(c.contrast_floor);
        w.num(c.max_candidates as f64);
        w.num(c.negatives_per_image as f64);
        w.num(c.boost_rounds as f64);
        w.num(c.boost_bins as f64);
        w.num(c.nms_iou);
        w.num(c.target_negative_rate);
        w.num(c.min_threshold);
        w.num(c.max_threshold);
        w.modality(self.rgb.as_ref());
        w.modality(self.thermal.as_ref());
        let mut out = Vec::with_capacity(10 + 8 * w.0.len());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_FORMAT.to_le_bytes());
        for v in w.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self, DetectorError> {
        if bytes.len() < 10 || &bytes[..8] != BLOB_MAGIC {
            return Err(DetectorError::BadBlob("missing magic"));
        }
        if u16::from_le_bytes([bytes[8], bytes[9]]) != BLOB_FORMAT {
            return Err(DetectorError::BadBlob("unsupported format version"));
        }
        let body = &bytes[10..];
        if body.len() % 8 != 0 {
            return Err(DetectorError::BadBlob("body is not a whole number of f64 values"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        let mut r = BlobReader(&values, 0);
        let version = r.num()? as u64;
        let config = DetectorConfig {
            grid_w: r.num()? as usize,
            grid_h: r.num()? as usize,
            hist_bins: r.num()? as usize,
            window_heights: r.list()?.into_iter().map(|h| h as u32).collect(),
            aspect: r.num()?,
            stride_frac: r.num()?,
            min_stride: r.num()? as u32,
            contrast_floor: r.num()?,
            max_candidates: r.num()? as usize,
            negatives_per_image: r.num()? as usize,
            boost_rounds: r.num()? as usize,
            boost_bins: r.num()? as usize,
            nms_iou: r.num()?,
            target_negative_rate: r.num()?,
            min_threshold: r.num()?,
            max_threshold: r.num()?,
        };
        let rgb = r.modality(&config)?;
        let thermal = r.modality(&config)?;
        if r.1 != values.len() {
            return Err(DetectorError::BadBlob("trailing values"));
        }
        Ok(Self { version, config, rgb, thermal })
    }

    /// Serialized frozen part of one modality (for bit-identity checks).
    pub fn frozen_bytes(&self, m: Modality) -> Vec<u8> {
        let mut w = BlobWriter(Vec::new());
        if let Some(mp) = self.modality(m) {
            w.list(&mp.features.channel_mean);
            w.list(&mp.features.channel_std);
            w.list(&mp.features.hist_edges);
            w.num(mp.features.polarity);
        }
        w.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Serialized tunable part of one modality.
    pub fn tunable_bytes(&self, m: Modality) -> Vec<u8> {
        let mut w = BlobWriter(Vec::new());
        if let Some(mp) = self.modality(m) {
            for c in &mp.classes {
                w.text(&c.label);
                w.learners(&c.learners);
                w.num(c.threshold);
            }
        }
        w.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ImageDims;
    use rand::Rng;

    /// Noisy grey field with dark upright blobs (pale top) at `objects`.
    pub(crate) fn scene(seed: u64, channels: u8, objects: &[(u32, u32, u32)]) -> (RasterImage, Vec<ScoredBox>) {
        let dims = ImageDims::new(96, 64).unwrap();
        let mut img = RasterImage::filled(dims, channels, &vec![130u8; channels as usize]).unwrap();
        let mut rng = math::rng_for(seed, &[]);
        for p in img.pixels_mut() {
            *p = (130 + rng.random_range(0..21) - 10) as u8;
        }
        let mut labels = Vec::new();
        for &(x, y, h) in objects {
            let w = (h * 3 / 4).max(1);
            for yy in y..y + h {
                for xx in x..x + w {
                    let v = if yy < y + h / 4 { 200 } else { 30 };
                    img.pixel_mut(xx, yy).iter_mut().for_each(|p| *p = v);
                }
            }
            let b = BBox::from_xywh(f64::from(x), f64::from(y), f64::from(w), f64::from(h)).unwrap();
            labels.push(ScoredBox::new(b, "cassowary", 1.0).unwrap());
        }
        (img, labels)
    }

    pub(crate) fn trained(channels: u8) -> ToyDetectorParams {
        let cfg = DetectorConfig::default();
        let data: Vec<(RasterImage, Vec<ScoredBox>)> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    scene(i, channels, &[(10 + (i as u32 % 50), 10, 16 + (i as u32 % 12))])
                } else {
                    scene(i, channels, &[])
                }
            })
            .collect();
        let view: Vec<TrainingImage<'_>> = data.iter().map(|(image, labels)| TrainingImage { image, labels }).collect();
        let features = fit_feature_stats(&cfg, &view).unwrap();
        let class = fit_class(&cfg, &features, "cassowary", &view).unwrap();
        let mut p = ToyDetectorParams::untrained(cfg);
        *p.modality_mut(Modality::from_channels(channels).unwrap()) = Some(ModalityParams { features, classes: vec![class] });
        p.version = 1;
        p
    }

    #[test]
    fn learns_to_find_blobs() {
        let p = trained(3);
        let mp = p.rgb.as_ref().unwrap();
        assert_eq!(mp.features.polarity, -1.0);
        let class = &mp.classes[0];
        assert_eq!(class.learners.len(), p.config.boost_rounds);
        let dim = WindowFeatures::dim(&p.config, 3);
        assert!(class.learners.iter().all(|l| l.feature < dim && l.table.len() == l.edges.len() + 1));
        assert!(class.threshold >= p.config.min_threshold && class.threshold <= p.config.max_threshold);
        let det = ToyDetector::new(p);
        let (img, gt) = scene(1000, 3, &[(40, 20, 20)]);
        let found = det.infer(&img).unwrap();
        assert!(found.iter().any(|d| iou(&d.bbox, &gt[0].bbox) >= 0.5), "{found:?}");
        let (empty, _) = scene(1001, 3, &[]);
        assert!(det.infer(&empty).unwrap().is_empty());
    }

    #[test]
    fn inference_is_deterministic_and_modality_checked() {
        let det = ToyDetector::new(trained(3));
        let (img, _) = scene(7, 3, &[(30, 30, 14)]);
        assert_eq!(det.infer(&img).unwrap(), det.infer(&img).unwrap());
        let (thermal, _) = scene(7, 1, &[]);
        assert_eq!(det.infer(&thermal), Err(DetectorError::ModalityMismatch(Modality::Thermal)));
    }

    #[test]
    fn blob_round_trip_and_rejections() {
        let mut p = trained(3);
        p.thermal = trained(1).thermal;
        let blob = p.to_blob();
        assert_eq!(&blob[..8], b"RADSTOYD");
        assert_eq!(u16::from_le_bytes([blob[8], blob[9]]), 1);
        assert_eq!((blob.len() - 10) % 8, 0);
        assert_eq!(ToyDetectorParams::from_blob(&blob).unwrap(), p);
        assert!(ToyDetectorParams::from_blob(&blob[..blob.len() - 8]).is_err());
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert_eq!(ToyDetectorParams::from_blob(&bad), Err(DetectorError::BadBlob("missing magic")));
    }

    #[test]
    fn weak_learner_bins_by_edges() {
        let l = WeakLearner { feature: 0, edges: vec![0.0, 1.0], table: vec![-1.0, 0.0, 1.0] };
        assert_eq!((l.bin(-5.0), l.bin(0.0), l.bin(0.5), l.bin(1.0), l.bin(9.0)), (0, 1, 1, 2, 2));
    }

    #[test]
    fn nothing_to_learn_without_labels() {
        let cfg = DetectorConfig::default();
        let (img, _) = scene(1, 3, &[]);
        let view = [TrainingImage { image: &img, labels: &[] }];
        assert_eq!(fit_feature_stats(&cfg, &view), Err(DetectorError::NothingToLearn));
    }
}
