//! Cloud side of the loop: pseudo-labelling uploads, bounded training-set
//! curation, fine-tuning the toy detector, and the model registry.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{
    fit_class, fit_feature_stats, DetectorError, DetectorModel, ModalityParams, ToyDetector, ToyDetectorParams,
    TrainingImage,
};
use crate::edge::UploadBatch;
use crate::eval::{average_precision, frame_tpr, ImageBox, MATCH_IOU};
use crate::geom::{BBox, ScoredBox};
use crate::label::{la_nms, LaNmsParams, LabelError, LabelHierarchy, PseudoLabelSet, ScoringBackend};
use crate::math;
use crate::raster::{Modality, RasterImage};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CloudError {
    #[error("duplicate image id: {0}")]
    DuplicateImage(String),
    #[error("image not available: {0}")]
    MissingImage(String),
    #[error("stage-2 threshold {stage2} below stage-1 threshold {stage1}")]
    ThresholdOrder { stage1: f64, stage2: f64 },
    #[error("frozen fraction must be in [0, 1), got {0}")]
    InvalidFrozenFraction(f64),
    #[error("manifest has no {0:?} entries")]
    NoEntries(Modality),
    #[error("unknown model version {0}")]
    UnknownVersion(u64),
    #[error("version {0} is not newer than {1}")]
    StaleVersion(u64, u64),
    #[error("version {0} has no metrics")]
    MissingMetrics(u64),
    #[error("version {0} has no parent to roll back to")]
    NoParent(u64),
    #[error("invalid caps: min {0}, max {1}")]
    InvalidCaps(usize, usize),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Anything that can hand back pixels for an image id.
pub trait ImageSource {
    fn image(&self, id: &str) -> Option<RasterImage>;
}

impl ImageSource for BTreeMap<String, RasterImage> {
    fn image(&self, id: &str) -> Option<RasterImage> {
        self.get(id).cloned()
    }
}

impl<F: Fn(&str) -> Option<RasterImage>> ImageSource for F {
    fn image(&self, id: &str) -> Option<RasterImage> {
        self(id)
    }
}

/// Runs LA-NMS over every uploaded frame. Frames without surviving boxes are
/// kept as explicit negatives.
pub fn pseudo_label_batch<B, F>(
    batch: &UploadBatch,
    scenes: F,
    target: &str,
    hierarchy: &LabelHierarchy,
    backend: &B,
    params: &LaNmsParams,
    stage1_threshold: f64,
) -> Result<Vec<PseudoLabelSet>, CloudError>
where
    B: ScoringBackend + ?Sized,
    B::Image: Sized,
    F: Fn(&str) -> Option<B::Image>,
{
    if params.score_threshold < stage1_threshold {
        return Err(CloudError::ThresholdOrder { stage1: stage1_threshold, stage2: params.score_threshold });
    }
    batch
        .frames
        .iter()
        .map(|c| {
            let id = &c.frame.id;
            let scene = scenes(id).ok_or_else(|| CloudError::MissingImage(id.clone()))?;
            Ok(la_nms(id, &scene, target, hierarchy, backend, params)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Field,
    Web,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub source: Source,
    pub modality: Modality,
    pub labels: Vec<ScoredBox>,
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub min_field: usize,
    pub max_field: usize,
    pub validation_size: usize,
    /// Upper bound on the share of field positives held out.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { min_field: 4000, max_field: 6000, validation_size: 1000, validation_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub entries: Vec<ManifestEntry>,
    /// Held-out field images; never used for training.
    pub validation: Vec<String>,
    pub iteration: u64,
    pub config: CurationConfig,
}

impl TrainingManifest {
    pub fn new(config: CurationConfig) -> Result<Self, CloudError> {
        if config.min_field > config.max_field {
            return Err(CloudError::InvalidCaps(config.min_field, config.max_field));
        }
        Ok(Self { entries: Vec::new(), validation: Vec::new(), iteration: 0, config })
    }

    pub fn field_count(&self) -> usize {
        self.entries.iter().filter(|e| e.source == Source::Field).count()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.image == id)
    }

    /// Adds a synthetic or web entry (never evicted).
    pub fn add_fixed(&mut self, entry: ManifestEntry) -> Result<(), CloudError> {
        if self.contains(&entry.image) {
            return Err(CloudError::DuplicateImage(entry.image));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn training_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        let held: BTreeSet<&str> = self.validation.iter().map(String::as_str).collect();
        self.entries.iter().filter(move |e| !held.contains(e.image.as_str()))
    }

    pub fn validation_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        let held: BTreeSet<&str> = self.validation.iter().map(String::as_str).collect();
        self.entries.iter().filter(move |e| held.contains(e.image.as_str()))
    }

    /// Lowercase hex SHA-256 of a canonical byte encoding.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let text = |h: &mut Sha256, s: &str| {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        };
        h.update(self.iteration.to_le_bytes());
        for v in [self.config.min_field, self.config.max_field, self.config.validation_size] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.config.validation_fraction.to_le_bytes());
        h.update(self.config.seed.to_le_bytes());
        h.update((self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            text(&mut h, &e.image);
            h.update([e.source as u8, e.modality.channels()]);
            h.update(e.iteration.to_le_bytes());
            h.update((e.labels.len() as u64).to_le_bytes());
            for l in &e.labels {
                for c in l.bbox.to_array() {
                    h.update(c.to_le_bytes());
                }
                text(&mut h, &l.label);
                h.update(l.score.to_le_bytes());
            }
        }
        h.update((self.validation.len() as u64).to_le_bytes());
        for v in &self.validation {
            text(&mut h, v);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Held-out split: up to `validation_size` field positives, never more
    /// than `validation_fraction` of them, drawn per iteration in proportion
    /// to that iteration's share.
    fn redraw_validation(&mut self) {
        let mut by_iter: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.source == Source::Field && !e.labels.is_empty()) {
            by_iter.entry(e.iteration).or_default().push(&e.image);
        }
        let total: usize = by_iter.values().map(Vec::len).sum();
        let want = self
            .config
            .validation_size
            .min(math::floor(self.config.validation_fraction * total as f64) as usize);
        let mut chosen = Vec::with_capacity(want);
        let mut remaining = want;
        let mut left = total;
        for (it, ids) in &by_iter {
            // Largest-remainder style: proportional share of what is left.
            let k = (remaining * ids.len() + left / 2).checked_div(left).unwrap_or(0).min(ids.len()).min(remaining);
            let mut pool: Vec<&str> = ids.clone();
            let mut rng = math::rng_for(self.config.seed, &[self.iteration, *it]);
            for j in 0..k {
                let pick = rng.random_range(j..pool.len());
                pool.swap(j, pick);
            }
            chosen.extend(pool[..k].iter().map(|s| String::from(*s)));
            remaining -= k;
            left -= ids.len();
        }
        chosen.sort();
        self.validation = chosen;
    }
}

/// Appends new field pseudo-label sets stamped with `iteration`, evicts the
/// oldest field entries above the cap, and redraws the validation split.
pub fn curate_training_set(
    manifest: &TrainingManifest,
    new: &[PseudoLabelSet],
    modality: Modality,
    iteration: u64,
) -> Result<TrainingManifest, CloudError> {
    let mut m = manifest.clone();
    let mut seen: BTreeSet<&str> = m.entries.iter().map(|e| e.image.as_str()).collect();
    for s in new {
        if !seen.insert(&s.image) {
            return Err(CloudError::DuplicateImage(s.image.clone()));
        }
    }
    m.iteration = iteration;
    m.entries.extend(new.iter().map(|s| ManifestEntry {
        image: s.image.clone(),
        source: Source::Field,
        modality,
        labels: s.boxes.clone(),
        iteration,
    }));
    let excess = m.field_count().saturating_sub(m.config.max_field);
    if excess > 0 {
        let mut field: Vec<(u64, usize)> = m
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.source == Source::Field)
            .map(|(i, e)| (e.iteration, i))
            .collect();
        field.sort_unstable();
        let evict: BTreeSet<usize> = field.iter().take(excess).map(|f| f.1).collect();
        let mut i = 0;
        m.entries.retain(|_| {
            let keep = !evict.contains(&i);
            i += 1;
            keep
        });
    }
    if !new.is_empty() || excess > 0 {
        m.redraw_validation();
    }
    Ok(m)
}

/// Metrics attached to a model version. Validation figures come from the
/// manifest's held-out split; per-range and FPR figures are filled in by
/// whoever owns an evaluation set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub validation_tpr: Option<f64>,
    pub validation_map50: Option<f64>,
    pub mtpr_near: Option<f64>,
    pub mtpr_far: Option<f64>,
    pub mtpr: Option<f64>,
    pub fpr: Option<f64>,
    pub map50: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub frozen_fraction: f64,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub id: u64,
    pub parent: Option<u64>,
    pub manifest_hash: String,
    pub training: TrainingConfig,
    pub metrics: MetricsSnapshot,
    pub iteration: u64,
}

fn load(images: &dyn ImageSource, id: &str) -> Result<RasterImage, CloudError> {
    images.image(id).ok_or_else(|| CloudError::MissingImage(id.into()))
}

/// Re-fits the tunable part (and, under half frozen, the feature
/// statistics) of one modality from the manifest's training entries.
pub fn fine_tune(
    params: &ToyDetectorParams,
    manifest: &TrainingManifest,
    training: TrainingConfig,
    images: &dyn ImageSource,
) -> Result<(ToyDetectorParams, ModelVersion), CloudError> {
    let ff = training.frozen_fraction;
    if !(0.0..1.0).contains(&ff) {
        return Err(CloudError::InvalidFrozenFraction(ff));
    }
    let m = training.modality;
    let entries: Vec<&ManifestEntry> = manifest.training_entries().filter(|e| e.modality == m).collect();
    if entries.is_empty() {
        return Err(CloudError::NoEntries(m));
    }
    let classes: BTreeSet<&str> = entries.iter().flat_map(|e| e.labels.iter().map(|l| l.label.as_str())).collect();
    if classes.is_empty() {
        return Err(DetectorError::NothingToLearn.into());
    }
    let pixels: Vec<RasterImage> = entries.iter().map(|e| load(images, &e.image)).collect::<Result<_, _>>()?;
    let data: Vec<TrainingImage<'_>> =
        entries.iter().zip(&pixels).map(|(e, image)| TrainingImage { image, labels: &e.labels }).collect();

    let cfg = &params.config;
    let previous = params.modality(m);
    let features = match previous {
        Some(p) if ff >= 0.5 => p.features.clone(),
        _ => fit_feature_stats(cfg, &data)?,
    };
    let mut models = Vec::new();
    for class in &classes {
        models.push(fit_class(cfg, &features, class, &data)?);
    }
    // Classes absent from this manifest keep their previous parameters.
    if let Some(p) = previous {
        for c in &p.classes {
            if !classes.contains(c.label.as_str()) {
                models.push(c.clone());
            }
        }
        models.sort_by(|a, b| a.label.cmp(&b.label));
    }
    let mut next = params.clone();
    next.version = params.version + 1;
    *next.modality_mut(m) = Some(ModalityParams { features, classes: models });

    let metrics = validation_metrics(&next, manifest, m, images)?;
    let version = ModelVersion {
        id: next.version,
        parent: (params.version > 0).then_some(params.version),
        manifest_hash: manifest.hash(),
        training,
        metrics,
        iteration: manifest.iteration,
    };
    Ok((next, version))
}

/// Thermal fine-tuning through the same path; RGB parameters are untouched.
pub fn adapt_modality(
    params: &ToyDetectorParams,
    manifest: &TrainingManifest,
    frozen_fraction: f64,
    images: &dyn ImageSource,
) -> Result<(ToyDetectorParams, ModelVersion), CloudError> {
    fine_tune(params, manifest, TrainingConfig { frozen_fraction, modality: Modality::Thermal }, images)
}

fn validation_metrics(
    params: &ToyDetectorParams,
    manifest: &TrainingManifest,
    m: Modality,
    images: &dyn ImageSource,
) -> Result<MetricsSnapshot, CloudError> {
    let det = ToyDetector::new(params.clone());
    let mut tprs = Vec::new();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for e in manifest.validation_entries().filter(|e| e.modality == m && !e.labels.is_empty()) {
        let found = det.infer(&load(images, &e.image)?)?;
        let gt: Vec<BBox> = e.labels.iter().map(|l| l.bbox).collect();
        if let Ok(t) = frame_tpr(&found, &gt, MATCH_IOU) {
            tprs.push(t);
        }
        dets.extend(found.into_iter().map(|d| ImageBox { image: e.image.clone(), item: d }));
        gts.extend(gt.into_iter().map(|b| ImageBox { image: e.image.clone(), item: b }));
    }
    if tprs.is_empty() {
        return Ok(MetricsSnapshot::default());
    }
    Ok(MetricsSnapshot {
        validation_tpr: Some(tprs.iter().sum::<f64>() / tprs.len() as f64),
        validation_map50: Some(average_precision(&dets, &gts, MATCH_IOU)),
        ..MetricsSnapshot::default()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub version: u64,
    pub previous: Option<u64>,
    /// False when the version was already active.
    pub changed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub versions: BTreeMap<u64, ModelVersion>,
    pub active: Option<u64>,
    pub history: Vec<u64>,
}

impl ModelRegistry {
    pub fn register(&mut self, version: ModelVersion) -> Result<(), CloudError> {
        if let Some((&last, _)) = self.versions.last_key_value() {
            if version.id <= last {
                return Err(CloudError::StaleVersion(version.id, last));
            }
        }
        self.versions.insert(version.id, version);
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&ModelVersion> {
        self.versions.get(&id)
    }

    pub fn active_version(&self) -> Option<&ModelVersion> {
        self.active.and_then(|a| self.versions.get(&a))
    }

    pub fn publish(&mut self, id: u64) -> Result<DeploymentRecord, CloudError> {
        let v = self.versions.get(&id).ok_or(CloudError::UnknownVersion(id))?;
        if v.metrics == MetricsSnapshot::default() && v.parent.is_some() {
            return Err(CloudError::MissingMetrics(id));
        }
        let previous = self.active;
        if previous == Some(id) {
            return Ok(DeploymentRecord { version: id, previous, changed: false });
        }
        self.active = Some(id);
        self.history.push(id);
        Ok(DeploymentRecord { version: id, previous, changed: true })
    }

    /// Activates the parent of the active version.
    pub fn rollback(&mut self) -> Result<DeploymentRecord, CloudError> {
        let active = self.active.ok_or(CloudError::UnknownVersion(0))?;
        let parent = self.versions[&active].parent.ok_or(CloudError::NoParent(active))?;
        if !self.versions.contains_key(&parent) {
            return Err(CloudError::UnknownVersion(parent));
        }
        self.active = Some(parent);
        self.history.push(parent);
        Ok(DeploymentRecord { version: parent, previous: Some(active), changed: true })
    }
}
