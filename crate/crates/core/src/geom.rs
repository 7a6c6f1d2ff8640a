//! Detection geometry: boxes, IoU, greedy NMS, clipping.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("invalid box [{0}, {1}, {2}, {3}]: coordinates must be finite with positive area")]
    InvalidBox(f64, f64, f64, f64),
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("empty class label")]
    EmptyLabel,
    #[error("image dimensions must be at least 1x1")]
    InvalidDims,
    #[error("box entirely outside image")]
    OutsideImage,
    #[error("iou threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
}

/// Axis-aligned box in pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeomError> {
        let finite = x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite();
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeomError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// Box from top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) * 0.5, (self.y_min + self.y_max) * 0.5)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    /// Intersection area; zero for disjoint or merely touching boxes.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn within(&self, dims: ImageDims) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= f64::from(dims.width)
            && self.y_max <= f64::from(dims.height)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeomError;
    fn try_from(a: [f64; 4]) -> Result<Self, GeomError> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeomError> {
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidDims);
        }
        Ok(Self { width, height })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// A box with a class label and a confidence in [0, 1]. Serialized as
/// `{"box":[x_min,y_min,x_max,y_max],"label":"...","score":0.9}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScoredBox")]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    pub score: f64,
}

#[derive(Deserialize)]
struct RawScoredBox {
    #[serde(rename = "box")]
    bbox: BBox,
    label: String,
    score: f64,
}

impl TryFrom<RawScoredBox> for ScoredBox {
    type Error = GeomError;
    fn try_from(r: RawScoredBox) -> Result<Self, GeomError> {
        ScoredBox::new(r.bbox, r.label, r.score)
    }
}

impl ScoredBox {
    pub fn new(bbox: BBox, label: impl Into<String>, score: f64) -> Result<Self, GeomError> {
        let label = label.into();
        if label.is_empty() {
            return Err(GeomError::EmptyLabel);
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(GeomError::InvalidScore(score));
        }
        Ok(Self { bbox, label, score })
    }
}

pub fn area(b: &BBox) -> f64 {
    (b.x_max - b.x_min) * (b.y_max - b.y_min)
}

/// Intersection over union. Touching boxes have IoU exactly 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = area(a) + area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Descending score, then larger area, then input order.
fn nms_order(candidates: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&candidates[i], &candidates[j]);
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| area(&b.bbox).partial_cmp(&area(&a.bbox)).unwrap_or(Ordering::Equal))
            .then_with(|| i.cmp(&j))
    });
    order
}

/// Greedy class-agnostic NMS. A candidate is kept iff its IoU with every
/// already-kept box is strictly below `iou_threshold`.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Result<Vec<ScoredBox>, GeomError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(GeomError::InvalidThreshold(iou_threshold));
    }
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in nms_order(candidates) {
        let c = &candidates[i];
        if kept.iter().all(|k| iou(&k.bbox, &c.bbox) < iou_threshold) {
            kept.push(c.clone());
        }
    }
    Ok(kept)
}

/// Intersects `b` with the image rectangle.
pub fn clip_box(b: &BBox, dims: ImageDims) -> Result<BBox, GeomError> {
    let x_min = b.x_min.max(0.0);
    let y_min = b.y_min.max(0.0);
    let x_max = b.x_max.min(f64::from(dims.width));
    let y_max = b.y_max.min(f64::from(dims.height));
    BBox::new(x_min, y_min, x_max, y_max).map_err(|_| GeomError::OutsideImage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn sb(b: BBox, label: &str, score: f64) -> ScoredBox {
        ScoredBox::new(b, label, score).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bx(0.0, 0.0, 1.0, 1.0)), 1.0);
        assert_eq!(area(&bx(0.0, 0.0, 2.0, 3.0)), 6.0);
        assert_eq!(area(&bx(1.5, 1.5, 2.5, 4.0)), 2.5);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert!((iou(&a, &bx(0.5, 0.0, 1.5, 1.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(ScoredBox::new(bx(0.0, 0.0, 1.0, 1.0), "", 0.5).is_err());
        assert!(ScoredBox::new(bx(0.0, 0.0, 1.0, 1.0), "x", 1.5).is_err());
    }

    #[test]
    fn nms_examples() {
        let single = vec![sb(bx(0.0, 0.0, 1.0, 1.0), "a", 0.5)];
        assert_eq!(nms(&single, 0.5).unwrap(), single);

        // B overlaps A with IoU 0.6: A=[0,0,10,10], B=[0,0,10,6] -> 60/100.
        let a = sb(bx(0.0, 0.0, 10.0, 10.0), "A", 0.9);
        let b = sb(bx(0.0, 0.0, 10.0, 6.0), "B", 0.8);
        let c = sb(bx(20.0, 20.0, 30.0, 30.0), "C", 0.7);
        assert!((iou(&a.bbox, &b.bbox) - 0.6).abs() < 1e-12);
        let kept = nms(&[b.clone(), c.clone(), a.clone()], 0.5).unwrap();
        assert_eq!(kept, vec![a.clone(), c]);

        let dup = vec![sb(bx(0.0, 0.0, 1.0, 1.0), "x", 0.8), sb(bx(0.0, 0.0, 1.0, 1.0), "y", 0.9)];
        let kept = nms(&dup, 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        assert!(nms(&[], 0.5).unwrap().is_empty());
        assert!(nms(&single, 0.0).is_err());
    }

    #[test]
    fn nms_is_class_agnostic() {
        let kept = nms(
            &[sb(bx(0.0, 0.0, 4.0, 4.0), "cassowary", 0.4), sb(bx(0.0, 0.0, 4.0, 4.2), "ratite", 0.75)],
            0.5,
        )
        .unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].label, "ratite");
    }

    #[test]
    fn nms_ties_prefer_larger_area_then_input_order() {
        let small = sb(bx(0.0, 0.0, 2.0, 2.0), "s", 0.5);
        let large = sb(bx(0.0, 0.0, 2.0, 2.5), "l", 0.5);
        let kept = nms(&[small.clone(), large.clone()], 0.5).unwrap();
        assert_eq!(kept, vec![large]);

        let first = sb(bx(0.0, 0.0, 2.0, 2.0), "first", 0.5);
        let second = sb(bx(0.0, 0.0, 2.0, 2.0), "second", 0.5);
        let kept = nms(&[first.clone(), second], 0.5).unwrap();
        assert_eq!(kept, vec![first]);
    }

    #[test]
    fn clip_examples() {
        let dims = ImageDims::new(4, 4).unwrap();
        assert_eq!(clip_box(&bx(-1.0, -1.0, 2.0, 2.0), dims).unwrap(), bx(0.0, 0.0, 2.0, 2.0));
        assert_eq!(clip_box(&bx(1.0, 1.0, 2.0, 2.0), dims).unwrap(), bx(1.0, 1.0, 2.0, 2.0));
        assert_eq!(clip_box(&bx(5.0, 5.0, 6.0, 6.0), dims), Err(GeomError::OutsideImage));
        assert_eq!(clip_box(&bx(4.0, 0.0, 6.0, 2.0), dims), Err(GeomError::OutsideImage));
    }

    #[test]
    fn scored_box_json_shape() {
        let s = sb(bx(1.0, 2.0, 3.0, 4.5), "cassowary", 0.75);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(text, r#"{"box":[1.0,2.0,3.0,4.5],"label":"cassowary","score":0.75}"#);
        let back: ScoredBox = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<ScoredBox>(r#"{"box":[1,2,1,4],"label":"a","score":0.5}"#).is_err());
        assert!(serde_json::from_str::<ScoredBox>(r#"{"box":[1,2,3,4],"label":"a","score":2.0}"#).is_err());
    }
}
