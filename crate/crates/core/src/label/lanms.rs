use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::hierarchy::{expand_labels, LabelHierarchy};
use super::scoring::{augmented_logit, ScoringBackend};
use super::LabelError;
use crate::geom::{nms, ScoredBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaNmsParams {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    /// Hops through the hierarchy; 0 disables augmentation.
    pub depth: usize,
    pub use_descriptors: bool,
}

impl Default for LaNmsParams {
    fn default() -> Self {
        Self { score_threshold: 0.5, iou_threshold: 0.5, depth: 1, use_descriptors: true }
    }
}

impl LaNmsParams {
    /// Same thresholds with augmentation switched off.
    pub fn plain(self) -> Self {
        Self { depth: 0, use_descriptors: false, ..self }
    }

    fn validate(&self) -> Result<(), LabelError> {
        for t in [self.score_threshold, self.iou_threshold] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(LabelError::InvalidThreshold(t));
            }
        }
        Ok(())
    }
}

/// Pseudo-labels for one image. Every box carries the target label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub image: String,
    pub boxes: Vec<ScoredBox>,
    pub backend: String,
    pub threshold: f64,
    pub iou_threshold: f64,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Expand, propose, score each region by its augmented logit, drop regions
/// under the score threshold, suppress overlaps across labels, relabel to
/// the target.
pub fn la_nms<B: ScoringBackend + ?Sized>(
    image_id: &str,
    image: &B::Image,
    target: &str,
    hierarchy: &LabelHierarchy,
    backend: &B,
    params: &LaNmsParams,
) -> Result<PseudoLabelSet, LabelError> {
    params.validate()?;
    let labels = expand_labels(hierarchy, target, params.depth, params.use_descriptors)?;
    let mut survivors = Vec::new();
    for region in backend.propose(image_id, image)? {
        let (score, best) = augmented_logit(&region, &labels, backend)?;
        let score = score.clamp(0.0, 1.0);
        if score >= params.score_threshold {
            survivors.push(ScoredBox::new(region.bbox, best, score)?);
        }
    }
    let boxes = nms(&survivors, params.iou_threshold)?
        .into_iter()
        .map(|mut b| {
            b.label = String::from(target);
            b
        })
        .collect();
    Ok(PseudoLabelSet {
        image: String::from(image_id),
        boxes,
        backend: String::from(backend.id()),
        threshold: params.score_threshold,
        iou_threshold: params.iou_threshold,
    })
}
