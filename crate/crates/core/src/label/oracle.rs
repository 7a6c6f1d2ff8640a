use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scoring::{Embedding, Region, ScoringBackend};
use super::LabelError;
use crate::geom::{clip_box, BBox, ImageDims};
use crate::math;

/// Class name the oracle uses for proposals that cover no object.
pub const BACKGROUND_CLASS: &str = "background";

/// A ground-truth object the oracle can see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class: String,
}

/// What the oracle backend is shown: image bounds plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScene {
    pub dims: ImageDims,
    pub objects: Vec<SceneObject>,
}

/// Expected logit for each (true class, queried label) pair.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AffinityTable(pub BTreeMap<String, BTreeMap<String, f64>>);

impl AffinityTable {
    pub fn set(&mut self, true_class: &str, label: &str, value: f64) -> &mut Self {
        self.0.entry(true_class.into()).or_default().insert(label.into(), value);
        self
    }

    /// Unlisted pairs have affinity 0.
    pub fn get(&self, true_class: &str, label: &str) -> f64 {
        self.0.get(true_class).and_then(|m| m.get(label)).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        for row in self.0.values() {
            for &v in row.values() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(LabelError::InvalidOracle("affinity outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub id: String,
    pub affinity: AffinityTable,
    /// Uniform noise in `[-a, a]` added to every logit.
    pub noise_amplitude: f64,
    /// Maximum per-edge displacement of a proposal, as a fraction of the
    /// object size, plus this many pixels.
    pub jitter_px: f64,
    pub proposals_per_object: usize,
    pub background_proposals: usize,
    /// Objects whose shorter side is below this are never proposed.
    pub min_object_px: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            id: "oracle".into(),
            affinity: AffinityTable::default(),
            noise_amplitude: 0.05,
            jitter_px: 1.0,
            proposals_per_object: 2,
            background_proposals: 2,
            min_object_px: 2.0,
            seed: 0,
        }
    }
}

/// Simulation stand-in for a vision-language detector. It reads ground
/// truth, proposes jittered boxes around each object plus a few background
/// boxes, and scores region/label pairs from an affinity table with
/// deterministic per-region noise, clamped to [0, 1].
///
/// Region embeddings are one-hot over the table's true classes; label
/// embeddings are the affinity column. The logit is taken from the table
/// directly because an arbitrary table is not realizable as cosines.
#[derive(Debug, Clone)]
pub struct SimulatedOracleBackend {
    cfg: OracleConfig,
    classes: Vec<String>,
}

impl SimulatedOracleBackend {
    pub fn new(cfg: OracleConfig) -> Result<Self, LabelError> {
        cfg.affinity.validate()?;
        if !(cfg.noise_amplitude >= 0.0) || !(cfg.jitter_px >= 0.0) {
            return Err(LabelError::InvalidOracle("noise and jitter must be non-negative"));
        }
        let mut classes: Vec<String> = cfg.affinity.0.keys().cloned().collect();
        if !classes.iter().any(|c| c == BACKGROUND_CLASS) {
            classes.push(BACKGROUND_CLASS.into());
        }
        Ok(Self { cfg, classes })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    fn class_index(&self, class: &str) -> usize {
        self.classes
            .iter()
            .position(|c| c == class)
            .unwrap_or_else(|| self.classes.iter().position(|c| c == BACKGROUND_CLASS).unwrap_or(0))
    }

    fn one_hot(&self, class: &str) -> Embedding {
        let mut v = alloc::vec![0.0; self.classes.len()];
        v[self.class_index(class)] = 1.0;
        // Non-empty and finite by construction.
        Embedding::new(v).unwrap_or_else(|_| unreachable!())
    }

    /// True class behind a region proposed by this backend.
    pub fn region_class(&self, region: &Region) -> &str {
        let v = region.embedding.values();
        let idx = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap_or(0);
        self.classes.get(idx).map(String::as_str).unwrap_or(BACKGROUND_CLASS)
    }

    fn jitter(&self, rng: &mut impl Rng, b: &BBox, dims: ImageDims) -> Option<BBox> {
        let amp_x = self.cfg.jitter_px + 0.05 * b.width();
        let amp_y = self.cfg.jitter_px + 0.05 * b.height();
        let mut d = |amp: f64| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
        let (dx0, dy0, dx1, dy1) = (d(amp_x), d(amp_y), d(amp_x), d(amp_y));
        let j = BBox::new(b.x_min() + dx0, b.y_min() + dy0, b.x_max() + dx1, b.y_max() + dy1).ok()?;
        clip_box(&j, dims).ok()
    }
}

impl ScoringBackend for SimulatedOracleBackend {
    type Image = OracleScene;

    fn id(&self) -> &str {
        &self.cfg.id
    }

    fn propose(&self, image_id: &str, scene: &OracleScene) -> Result<Vec<Region>, LabelError> {
        let image_key = math::hash_str(image_id);
        let mut rng = math::rng_for(self.cfg.seed, &[image_key]);
        let mut out = Vec::new();
        let push = |bbox: BBox, class: &str, out: &mut Vec<Region>| {
            let key = math::derive_seed(self.cfg.seed, &[image_key, out.len() as u64]);
            out.push(Region { bbox, embedding: self.one_hot(class), key });
        };
        for obj in &scene.objects {
            if obj.bbox.width().min(obj.bbox.height()) < self.cfg.min_object_px {
                continue;
            }
            for _ in 0..self.cfg.proposals_per_object {
                if let Some(b) = self.jitter(&mut rng, &obj.bbox, scene.dims) {
                    push(b, &obj.class, &mut out);
                }
            }
        }
        let (w, h) = (f64::from(scene.dims.width), f64::from(scene.dims.height));
        for _ in 0..self.cfg.background_proposals {
            let bw = rng.random_range(0.05..0.3) * w;
            let bh = rng.random_range(0.05..0.3) * h;
            let x = rng.random_range(0.0..(w - bw).max(f64::MIN_POSITIVE));
            let y = rng.random_range(0.0..(h - bh).max(f64::MIN_POSITIVE));
            if let Ok(b) = BBox::from_xywh(x, y, bw, bh) {
                push(b, BACKGROUND_CLASS, &mut out);
            }
        }
        Ok(out)
    }

    fn embed_label(&self, label: &str) -> Result<Embedding, LabelError> {
        let mut v: Vec<f64> = self.classes.iter().map(|c| self.cfg.affinity.get(c, label)).collect();
        // Bias term keeps the vector non-zero for labels with no affinity.
        v.push(1e-3);
        Embedding::new(v)
    }

    fn logit(&self, region: &Region, label: &str) -> Result<f64, LabelError> {
        let class = self.region_class(region);
        let base = self.cfg.affinity.get(class, label);
        let u = math::unit_from_hash(math::derive_seed(region.key, &[math::hash_str(label)]));
        let noise = self.cfg.noise_amplitude * (2.0 * u - 1.0);
        Ok((base + noise).clamp(0.0, 1.0))
    }
}
