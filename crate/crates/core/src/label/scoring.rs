use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::hierarchy::AugmentedLabelSet;
use super::LabelError;
use crate::geom::BBox;
use crate::math;

/// Fixed-length embedding of an image region or a text label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, LabelError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(LabelError::InvalidEmbedding);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.0.iter().map(|v| v * v).sum())
    }
}

/// A proposed region: where it is and what the image encoder made of it.
/// `key` is an opaque per-region token a backend may use for its own
/// deterministic bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bbox: BBox,
    pub embedding: Embedding,
    pub key: u64,
}

/// Image/text encoder pair seen by the pseudo-labeller.
///
/// Implementations must be deterministic for a fixed configuration and keep
/// a constant embedding dimension. `logit` defaults to the cosine similarity
/// between the region embedding and the label embedding; a backend may
/// override it when it scores regions directly.
pub trait ScoringBackend {
    type Image: ?Sized;

    fn id(&self) -> &str;

    fn propose(&self, image_id: &str, image: &Self::Image) -> Result<Vec<Region>, LabelError>;

    fn embed_label(&self, label: &str) -> Result<Embedding, LabelError>;

    fn logit(&self, region: &Region, label: &str) -> Result<f64, LabelError> {
        let text = self.embed_label(label)?;
        cosine_logit(&region.embedding, &text)
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for &B {
    type Image = B::Image;
    fn id(&self) -> &str {
        (**self).id()
    }
    fn propose(&self, image_id: &str, image: &Self::Image) -> Result<Vec<Region>, LabelError> {
        (**self).propose(image_id, image)
    }
    fn embed_label(&self, label: &str) -> Result<Embedding, LabelError> {
        (**self).embed_label(label)
    }
    fn logit(&self, region: &Region, label: &str) -> Result<f64, LabelError> {
        (**self).logit(region, label)
    }
}

pub fn cosine_logit(a: &Embedding, b: &Embedding) -> Result<f64, LabelError> {
    if a.dim() != b.dim() {
        return Err(LabelError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(LabelError::ZeroNorm);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Best logit over the target and every related label. Ties go to the
/// label that comes first in the set.
pub fn augmented_logit<B: ScoringBackend + ?Sized>(
    region: &Region,
    labels: &AugmentedLabelSet,
    backend: &B,
) -> Result<(f64, String), LabelError> {
    let mut best: Option<(f64, &String)> = None;
    for label in labels.labels() {
        let s = backend.logit(region, label)?;
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, label));
        }
    }
    best.map(|(s, l)| (s, l.clone())).ok_or(LabelError::EmptyLabelSet)
}

/// Argmax over target classes of the augmented logit. Returns the target of
/// the winning set, never the related label that produced the maximum.
pub fn predict_augmented<B: ScoringBackend + ?Sized>(
    region: &Region,
    class_set: &[AugmentedLabelSet],
    backend: &B,
) -> Result<String, LabelError> {
    let mut best: Option<(f64, &AugmentedLabelSet)> = None;
    for set in class_set {
        let (s, _) = augmented_logit(region, set, backend)?;
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, set));
        }
    }
    best.map(|(_, set)| String::from(set.target())).ok_or(LabelError::EmptyLabelSet)
}

/// Backend over fixed, precomputed embeddings. Regions are registered per
/// image id, labels map to fixed text embeddings; scoring is plain cosine.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTableBackend {
    id: String,
    labels: alloc::collections::BTreeMap<String, Embedding>,
    regions: alloc::collections::BTreeMap<String, Vec<Region>>,
}

impl EmbeddingTableBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), ..Self::default() }
    }

    pub fn with_label(mut self, label: impl Into<String>, e: Embedding) -> Self {
        self.labels.insert(label.into(), e);
        self
    }

    pub fn with_region(mut self, image_id: impl Into<String>, bbox: BBox, e: Embedding) -> Self {
        let list = self.regions.entry(image_id.into()).or_default();
        let key = list.len() as u64;
        list.push(Region { bbox, embedding: e, key });
        self
    }
}

impl ScoringBackend for EmbeddingTableBackend {
    type Image = ();

    fn id(&self) -> &str {
        &self.id
    }

    fn propose(&self, image_id: &str, _image: &()) -> Result<Vec<Region>, LabelError> {
        Ok(self.regions.get(image_id).cloned().unwrap_or_default())
    }

    fn embed_label(&self, label: &str) -> Result<Embedding, LabelError> {
        self.labels.get(label).cloned().ok_or_else(|| LabelError::UnknownLabel(label.into()))
    }
}
