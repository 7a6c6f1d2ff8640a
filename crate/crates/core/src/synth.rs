//! Instance extraction and Gaussian-blended compositing of synthetic
//! training images.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{clip_box, BBox, GeomError, ImageDims, ScoredBox};
use crate::math;
use crate::raster::{RasterError, RasterImage};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("empty instance: mask selects no pixels")]
    EmptyInstance,
    #[error("channel mismatch: instance has {instance}, background has {background}")]
    ChannelMismatch { instance: u8, background: u8 },
    #[error("placement has zero area after clipping")]
    ZeroAreaPlacement,
    #[error("placement impossible: instance does not fit the background at minimum scale")]
    PlacementImpossible,
    #[error("no instances or no backgrounds supplied")]
    NothingToComposite,
    #[error("invalid blend parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("provenance refers to unknown {0}")]
    BadProvenance(&'static str),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Binary mask over a pixel rectangle of the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub origin: (u32, u32),
    pub dims: ImageDims,
    pub values: Vec<bool>,
}

/// Produces a binary object mask confined to a box.
pub trait MaskProvider {
    fn mask(&self, image: &RasterImage, bbox: &BBox) -> Result<Mask, SynthError>;
}

/// Selects the whole box.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullBoxMask;

impl MaskProvider for FullBoxMask {
    fn mask(&self, image: &RasterImage, bbox: &BBox) -> Result<Mask, SynthError> {
        let (x0, y0, x1, y1) = image.pixel_span(bbox).ok_or(SynthError::ZeroAreaPlacement)?;
        let dims = ImageDims::new(x1 - x0, y1 - y0)?;
        Ok(Mask { origin: (x0, y0), dims, values: vec![true; dims.pixel_count()] })
    }
}

/// Intensity thresholding at the Otsu level of the luma histogram inside
/// the box. The foreground is whichever side of the threshold is in the
/// minority along the box border. A uniform box is selected whole.
#[derive(Debug, Clone, Copy, Default)]
pub struct OtsuMaskProvider;

/// Otsu threshold over 8-bit values: foreground is `v > t`.
pub fn otsu_threshold(values: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(f64, u8)> = None;
    for t in 0..255usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, t as u8));
        }
    }
    best.map(|(_, t)| t)
}

impl MaskProvider for OtsuMaskProvider {
    fn mask(&self, image: &RasterImage, bbox: &BBox) -> Result<Mask, SynthError> {
        let (x0, y0, x1, y1) = image.pixel_span(bbox).ok_or(SynthError::ZeroAreaPlacement)?;
        let dims = ImageDims::new(x1 - x0, y1 - y0)?;
        let mut lum = Vec::with_capacity(dims.pixel_count());
        for y in y0..y1 {
            for x in x0..x1 {
                lum.push(math::round(image.luma(x, y)).clamp(0.0, 255.0) as u8);
            }
        }
        let Some(t) = otsu_threshold(&lum) else {
            return Ok(Mask { origin: (x0, y0), dims, values: vec![true; dims.pixel_count()] });
        };
        let (w, h) = (dims.width as usize, dims.height as usize);
        let (mut border, mut border_hi) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                    border += 1;
                    border_hi += usize::from(lum[y * w + x] > t);
                }
            }
        }
        let bright_fg = 2 * border_hi <= border;
        let values = lum.iter().map(|&v| (v > t) == bright_fg).collect();
        Ok(Mask { origin: (x0, y0), dims, values })
    }
}

/// A cut-out object: pixels plus soft alpha over the same rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInstance {
    pub patch: RasterImage,
    pub alpha: Vec<f64>,
    pub source_id: String,
    pub label: String,
}

impl MaskedInstance {
    pub fn new(patch: RasterImage, alpha: Vec<f64>, source_id: String, label: String) -> Result<Self, SynthError> {
        if alpha.len() != patch.dims().pixel_count() {
            return Err(SynthError::InvalidParameter("alpha size differs from patch"));
        }
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(SynthError::InvalidParameter("alpha outside [0, 1]"));
        }
        if !alpha.iter().any(|&a| a > 0.0) {
            return Err(SynthError::EmptyInstance);
        }
        Ok(Self { patch, alpha, source_id, label })
    }

    pub fn dims(&self) -> ImageDims {
        self.patch.dims()
    }

    /// Bilinear resample of patch and alpha to `dims`.
    pub fn resized(&self, dims: ImageDims) -> Result<Self, SynthError> {
        let (sw, sh) = (self.dims().width as usize, self.dims().height as usize);
        let (dw, dh) = (dims.width as usize, dims.height as usize);
        let c = self.patch.channels() as usize;
        let src = self.patch.pixels();
        let mut px = vec![0u8; dw * dh * c];
        let mut alpha = vec![0.0; dw * dh];
        let sample = |coord: f64, n: usize| {
            let f = (coord.max(0.0)).min((n - 1) as f64);
            let i0 = math::floor(f) as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, f - i0 as f64)
        };
        for y in 0..dh {
            let (y0, y1, fy) = sample((y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5, sh);
            for x in 0..dw {
                let (x0, x1, fx) = sample((x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5, sw);
                let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
                let idx = [y0 * sw + x0, y0 * sw + x1, y1 * sw + x0, y1 * sw + x1];
                let a: f64 = w.iter().zip(idx).map(|(w, i)| w * self.alpha[i]).sum();
                alpha[y * dw + x] = a.clamp(0.0, 1.0);
                for ch in 0..c {
                    let v: f64 = w.iter().zip(idx).map(|(w, i)| w * f64::from(src[i * c + ch])).sum();
                    px[(y * dw + x) * c + ch] = math::round(v).clamp(0.0, 255.0) as u8;
                }
            }
        }
        if !alpha.iter().any(|&a| a > 0.0) {
            return Err(SynthError::EmptyInstance);
        }
        Ok(Self {
            patch: RasterImage::new(dims, self.patch.channels(), px)?,
            alpha,
            source_id: self.source_id.clone(),
            label: self.label.clone(),
        })
    }
}

pub fn extract_instance(
    image: &RasterImage,
    bbox: &BBox,
    provider: &dyn MaskProvider,
    source_id: &str,
    label: &str,
) -> Result<MaskedInstance, SynthError> {
    let clipped = clip_box(bbox, image.dims())?;
    let mask = provider.mask(image, &clipped)?;
    let span = BBox::new(
        f64::from(mask.origin.0),
        f64::from(mask.origin.1),
        f64::from(mask.origin.0 + mask.dims.width),
        f64::from(mask.origin.1 + mask.dims.height),
    )?;
    let (patch, _) = image.crop(&span)?;
    if patch.dims() != mask.dims {
        return Err(SynthError::InvalidParameter("mask provider returned a mask of the wrong size"));
    }
    let alpha: Vec<f64> = mask.values.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    MaskedInstance::new(patch, alpha, source_id.into(), label.into())
}

/// Normalized sampled Gaussian of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = math::ceil(3.0 * sigma) as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Alpha over the patch rectangle grown by the kernel radius on every
/// side, smoothed separably with zero extension. Returns `(field, radius)`.
pub fn smooth_alpha(alpha: &[f64], dims: ImageDims, sigma: f64) -> (Vec<f64>, usize) {
    let k = gaussian_kernel(sigma);
    let r = k.len() / 2;
    let (w, h) = (dims.width as usize, dims.height as usize);
    let (fw, fh) = (w + 2 * r, h + 2 * r);
    let mut padded = vec![0.0; fw * fh];
    for y in 0..h {
        padded[(y + r) * fw + r..(y + r) * fw + r + w].copy_from_slice(&alpha[y * w..(y + 1) * w]);
    }
    if r == 0 {
        return (padded, 0);
    }
    let mut tmp = vec![0.0; fw * fh];
    for y in 0..fh {
        for x in 0..fw {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sx = x as i64 + j as i64 - r as i64;
                if sx >= 0 && (sx as usize) < fw {
                    acc += kv * padded[y * fw + sx as usize];
                }
            }
            tmp[y * fw + x] = acc;
        }
    }
    let mut out = vec![0.0; fw * fh];
    for y in 0..fh {
        for x in 0..fw {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sy = y as i64 + j as i64 - r as i64;
                if sy >= 0 && (sy as usize) < fh {
                    acc += kv * tmp[sy as usize * fw + x];
                }
            }
            out[y * fw + x] = acc.clamp(0.0, 1.0);
        }
    }
    (out, r)
}

/// Result of a blend: the composite plus the smoothed alpha placed in
/// background coordinates (useful for deriving labels).
#[derive(Debug, Clone, PartialEq)]
pub struct BlendOutput {
    pub image: RasterImage,
    /// Bounding box of background pixels whose smoothed alpha exceeds 0.5.
    pub visible_box: Option<BBox>,
}

pub fn gaussian_blend(
    instance: &MaskedInstance,
    background: &RasterImage,
    position: (i64, i64),
    sigma: f64,
) -> Result<RasterImage, SynthError> {
    blend_into(instance, background, position, sigma).map(|o| o.image)
}

/// Composites `instance` with its top-left corner at `position`:
/// `out = a * patch + (1 - a) * background` with `a` the Gaussian-smoothed
/// alpha. Pixels where the smoothed alpha is exactly zero are not touched.
pub fn blend_into(
    instance: &MaskedInstance,
    background: &RasterImage,
    position: (i64, i64),
    sigma: f64,
) -> Result<BlendOutput, SynthError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(SynthError::InvalidParameter("sigma must be finite and non-negative"));
    }
    if instance.patch.channels() != background.channels() {
        return Err(SynthError::ChannelMismatch {
            instance: instance.patch.channels(),
            background: background.channels(),
        });
    }
    let (pw, ph) = (i64::from(instance.dims().width), i64::from(instance.dims().height));
    let (bw, bh) = (i64::from(background.width()), i64::from(background.height()));
    let (px, py) = position;
    if px >= bw || py >= bh || px + pw <= 0 || py + ph <= 0 {
        return Err(SynthError::ZeroAreaPlacement);
    }
    let (field, r) = smooth_alpha(&instance.alpha, instance.dims(), sigma);
    let r = r as i64;
    let fw = pw + 2 * r;
    let c = background.channels() as usize;
    let patch = instance.patch.pixels();
    let mut out = background.clone();
    let (mut vx0, mut vy0, mut vx1, mut vy1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for fy in 0..ph + 2 * r {
        let by = py - r + fy;
        if by < 0 || by >= bh {
            continue;
        }
        for fx in 0..fw {
            let bx = px - r + fx;
            if bx < 0 || bx >= bw {
                continue;
            }
            let a = field[(fy * fw + fx) as usize];
            if a == 0.0 {
                continue;
            }
            if a > 0.5 {
                vx0 = vx0.min(bx);
                vy0 = vy0.min(by);
                vx1 = vx1.max(bx + 1);
                vy1 = vy1.max(by + 1);
            }
            // Spill beyond the patch rectangle samples the nearest patch pixel.
            let sx = (fx - r).clamp(0, pw - 1) as usize;
            let sy = (fy - r).clamp(0, ph - 1) as usize;
            let src = &patch[(sy * pw as usize + sx) * c..][..c];
            let dst = out.pixel_mut(bx as u32, by as u32);
            for ch in 0..c {
                let v = a * f64::from(src[ch]) + (1.0 - a) * f64::from(dst[ch]);
                dst[ch] = math::round(v).clamp(0.0, 255.0) as u8;
            }
        }
    }
    let visible_box = (vx0 < vx1)
        .then(|| BBox::new(vx0 as f64, vy0 as f64, vx1 as f64, vy1 as f64).ok())
        .flatten();
    Ok(BlendOutput { image: out, visible_box })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub id: String,
    pub image: RasterImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementPolicy {
    /// Instance height as a fraction of background height.
    pub scale_min: f64,
    pub scale_max: f64,
    pub instances_min: usize,
    pub instances_max: usize,
    pub sigma: f64,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        Self { scale_min: 0.3, scale_max: 1.0, instances_min: 1, instances_max: 3, sigma: 1.0 }
    }
}

/// Where one instance went.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub instance: usize,
    pub x: i64,
    pub y: i64,
    /// Pasted size in pixels.
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub index: usize,
    pub background: usize,
    pub background_id: String,
    pub instance_ids: Vec<String>,
    pub placements: Vec<Placement>,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: RasterImage,
    pub labels: Vec<ScoredBox>,
    pub provenance: SampleProvenance,
}

/// Renders a sample from explicit placements. This is also the
/// regeneration path: provenance alone reproduces the sample bit-exactly.
pub fn render_sample(
    instances: &[MaskedInstance],
    backgrounds: &[Background],
    provenance: &SampleProvenance,
) -> Result<SyntheticSample, SynthError> {
    let bg = backgrounds.get(provenance.background).ok_or(SynthError::BadProvenance("background"))?;
    let mut image = bg.image.clone();
    let mut labels = Vec::new();
    for p in &provenance.placements {
        let inst = instances.get(p.instance).ok_or(SynthError::BadProvenance("instance"))?;
        let scaled = if inst.dims() == (ImageDims { width: p.width, height: p.height }) {
            inst.clone()
        } else {
            inst.resized(ImageDims::new(p.width, p.height)?)?
        };
        let out = blend_into(&scaled, &image, (p.x, p.y), provenance.sigma)?;
        image = out.image;
        if let Some(b) = out.visible_box {
            labels.push(ScoredBox::new(b, inst.label.clone(), 1.0)?);
        }
    }
    Ok(SyntheticSample { image, labels, provenance: provenance.clone() })
}

fn plan_sample(
    instances: &[MaskedInstance],
    backgrounds: &[Background],
    policy: &PlacementPolicy,
    index: usize,
    seed: u64,
) -> Result<SampleProvenance, SynthError> {
    let mut rng = math::rng_for(seed, &[index as u64]);
    let background = rng.random_range(0..backgrounds.len());
    let bg = &backgrounds[background].image;
    let (bw, bh) = (bg.width(), bg.height());
    let count = rng.random_range(policy.instances_min..=policy.instances_max.max(policy.instances_min));
    let mut placements: Vec<Placement> = Vec::new();
    let mut taken: Vec<BBox> = Vec::new();
    for slot in 0..count {
        let instance = rng.random_range(0..instances.len());
        let d = instances[instance].dims();
        let aspect = f64::from(d.width) / f64::from(d.height);
        let min_h = policy.scale_min * f64::from(bh);
        if math::round(min_h * aspect) > f64::from(bw) {
            return Err(SynthError::PlacementImpossible);
        }
        // Shrink the scale range so the instance also fits horizontally.
        let max_scale = policy.scale_max.min(f64::from(bw) / (aspect * f64::from(bh)));
        let mut placed = false;
        for _ in 0..16 {
            let scale = if max_scale > policy.scale_min {
                rng.random_range(policy.scale_min..=max_scale)
            } else {
                policy.scale_min
            };
            let h = (math::round(scale * f64::from(bh)) as u32).clamp(1, bh);
            let w = (math::round(f64::from(h) * aspect) as u32).clamp(1, bw);
            let x = i64::from(rng.random_range(0..=bw - w));
            let y = i64::from(rng.random_range(0..=bh - h));
            let rect = BBox::from_xywh(x as f64, y as f64, f64::from(w), f64::from(h))?;
            if taken.iter().any(|t| t.intersection_area(&rect) > 0.0) {
                continue;
            }
            taken.push(rect);
            placements.push(Placement { instance, x, y, width: w, height: h });
            placed = true;
            break;
        }
        if !placed && slot == 0 {
            return Err(SynthError::PlacementImpossible);
        }
    }
    Ok(SampleProvenance {
        index,
        background,
        background_id: backgrounds[background].id.clone(),
        instance_ids: placements.iter().map(|p| instances[p.instance].source_id.clone()).collect(),
        placements,
        sigma: policy.sigma,
        seed,
    })
}

/// Generates `n` composites. Sample `i` draws from its own RNG stream
/// derived from `(seed, i)`, so samples are independent of each other.
pub fn generate_synthetic_set(
    instances: &[MaskedInstance],
    backgrounds: &[Background],
    n: usize,
    policy: &PlacementPolicy,
    seed: u64,
) -> Result<Vec<SyntheticSample>, SynthError> {
    if instances.is_empty() || backgrounds.is_empty() {
        return Err(SynthError::NothingToComposite);
    }
    if n == 0 || policy.instances_min == 0 || !(policy.scale_min > 0.0 && policy.scale_min <= policy.scale_max) {
        return Err(SynthError::InvalidParameter("need n >= 1, at least one instance, 0 < scale_min <= scale_max"));
    }
    for bg in backgrounds {
        if bg.image.channels() != instances[0].patch.channels() {
            return Err(SynthError::ChannelMismatch {
                instance: instances[0].patch.channels(),
                background: bg.image.channels(),
            });
        }
    }
    (0..n)
        .map(|i| {
            let prov = plan_sample(instances, backgrounds, policy, i, seed)?;
            render_sample(instances, backgrounds, &prov)
        })
        .collect()
}
