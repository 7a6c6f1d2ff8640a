//! Scenario configuration. One JSON document overrides any subset of the
//! defaults; `"default"` names the built-in scenario.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rads_core::cloud::CurationConfig;
use rads_core::detector::DetectorConfig;
use rads_core::edge::{EdgeConfig, FilterParams};
use rads_core::label::{AffinityTable, HierarchySpec, LaNmsParams, LabelHierarchy, OracleConfig};
use rads_core::synth::PlacementPolicy;
use serde::{Deserialize, Serialize};

use crate::world::WorldConfig;

pub const BUNDLED_HIERARCHY: &str = include_str!("../data/hierarchy.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Stage-2 rounds after the stage-1 model.
    pub iterations: u32,
    /// Simulated field days between fine-tunes.
    pub days_per_iteration: u32,
    pub world: WorldConfig,
    pub detector: DetectorConfig,
    pub stage1: Stage1Config,
    pub labelling: LabellingConfig,
    pub edge: EdgeConfig,
    /// Edge inference keeps every window scoring at least this; `None` uses
    /// each class's calibrated threshold.
    pub edge_score_floor: Option<f64>,
    pub curation: CurationConfig,
    pub frozen_fraction: f64,
    pub transport: TransportConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Object-centric "web" photos per modality.
    pub web_images: usize,
    /// Target-free field captures per camera used as composite backgrounds.
    pub backgrounds_per_camera: usize,
    pub synthetic_images: usize,
    /// Extra target-free field captures per camera kept as explicit negatives.
    pub negatives_per_camera: usize,
    pub placement: PlacementPolicy,
    pub lanms: LaNmsParams,
    pub thermal: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            web_images: 60,
            backgrounds_per_camera: 30,
            synthetic_images: 400,
            negatives_per_camera: 80,
            placement: PlacementPolicy { scale_min: 0.06, scale_max: 0.5, instances_min: 1, instances_max: 2, sigma: 0.8 },
            lanms: LaNmsParams { score_threshold: 0.5, ..LaNmsParams::default() },
            thermal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabellingConfig {
    pub target: String,
    /// Hierarchy JSON file; the bundled hierarchy when absent.
    pub hierarchy: Option<PathBuf>,
    pub oracle: OracleConfig,
    pub stage2: LaNmsParams,
}

impl Default for LabellingConfig {
    fn default() -> Self {
        Self {
            target: "cassowary".into(),
            hierarchy: None,
            oracle: OracleConfig { affinity: field_affinities(), ..OracleConfig::default() },
            stage2: LaNmsParams { score_threshold: 0.65, ..LaNmsParams::default() },
        }
    }
}

impl LabellingConfig {
    pub fn load_hierarchy(&self) -> Result<LabelHierarchy> {
        let text = match &self.hierarchy {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => BUNDLED_HIERARCHY.to_string(),
        };
        let spec: HierarchySpec = serde_json::from_str(&text).context("parsing hierarchy")?;
        Ok(LabelHierarchy::from_spec(&spec)?)
    }
}

/// How the simulated vision-language backend rates each simulator class
/// against the labels the bundled hierarchy produces for "cassowary".
pub fn field_affinities() -> AffinityTable {
    let mut t = AffinityTable::default();
    for (label, v) in [
        ("cassowary", 0.6),
        ("flightless bird", 0.72),
        ("southern cassowary", 0.78),
        ("dwarf cassowary", 0.62),
        ("ratite", 0.66),
        ("ratite bird", 0.68),
        ("black cassowary", 0.7),
        ("black flightless bird", 0.76),
    ] {
        t.set("cassowary", label, v);
    }
    for (class, label, v) in [
        ("pig", "cassowary", 0.22),
        ("pig", "black cassowary", 0.3),
        ("pig", "flightless bird", 0.12),
        ("person", "cassowary", 0.08),
        ("vehicle", "cassowary", 0.04),
        ("stump", "cassowary", 0.3),
        ("stump", "black cassowary", 0.42),
        ("background", "cassowary", 0.05),
    ] {
        t.set(class, label, v);
    }
    t
}

/// The confusion used for the augmentation ablation: the bare target label
/// scores 0.4 on true instances, a child label 0.8.
pub fn ablation_affinities() -> AffinityTable {
    let mut t = AffinityTable::default();
    t.set("cassowary", "cassowary", 0.4).set("cassowary", "southern cassowary", 0.8);
    t.set("pig", "cassowary", 0.2).set("stump", "cassowary", 0.15).set("background", "cassowary", 0.05);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    /// Probability that the simulated link drops a frame, each direction.
    pub loss_rate: f64,
    pub window: usize,
    pub budget_bytes: u64,
    pub budget_window_s: f64,
    pub frames_per_message: usize,
    /// Reconnect attempts before a TCP session gives up.
    pub connect_retries: u32,
    pub timeout_ms: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            loss_rate: 0.05,
            window: 16,
            budget_bytes: 10 * 1024 * 1024,
            budget_window_s: 600.0,
            frames_per_message: 16,
            connect_retries: 50,
            timeout_ms: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// RGB sighting cases per range group.
    pub cases_per_group: usize,
    pub thermal_cases_per_group: usize,
    pub frames_per_case: usize,
    /// Target-free frames per modality, dry and (when drift is scheduled) wet.
    pub negatives: usize,
    pub thermal_negatives: usize,
    pub fpr_cutoff: f64,
    /// Score thresholds of the ROC grid.
    pub roc_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cases_per_group: 20,
            thermal_cases_per_group: 8,
            frames_per_case: 8,
            negatives: 800,
            thermal_negatives: 200,
            fpr_cutoff: 0.004,
            roc_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Also write pixels for continuous-log frames (sidecars are always written).
    pub continuous_images: bool,
    pub event_images: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { continuous_images: false, event_images: true }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let days_per_iteration = 2;
        Self {
            seed: 7,
            iterations: 5,
            days_per_iteration,
            world: WorldConfig { drift_day: Some(f64::from(3 * days_per_iteration)), ..WorldConfig::default() },
            detector: DetectorConfig::default(),
            stage1: Stage1Config::default(),
            labelling: LabellingConfig::default(),
            edge: EdgeConfig { filter: FilterParams { s_evt: 0.85, ..FilterParams::default() }, ..EdgeConfig::default() },
            edge_score_floor: Some(0.5),
            curation: CurationConfig::default(),
            frozen_fraction: 0.5,
            transport: TransportConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ScenarioConfig {
    /// `"default"` or a JSON file path.
    pub fn load(spec: &str) -> Result<Self> {
        let cfg = if spec == "default" {
            Self::default()
        } else {
            Self::from_file(Path::new(spec))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn duration_days(&self) -> u32 {
        self.iterations.max(1) * self.days_per_iteration
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        let rates = [
            ("sightings_per_week", w.sightings_per_week),
            ("vehicles_per_hour", w.vehicles_per_hour),
            ("people_per_hour", w.people_per_hour),
            ("pigs_per_day", w.pigs_per_day),
            ("stumps_per_day", w.stumps_per_day),
        ];
        for (name, r) in rates {
            if !(r >= 0.0 && r.is_finite()) {
                bail!("{name} must be a finite non-negative rate, got {r}");
            }
        }
        if let Some(d) = w.drift_day {
            if !(d >= 0.0 && d <= f64::from(self.duration_days())) {
                bail!("drift day {d} outside the {}-day run", self.duration_days());
            }
        }
        if w.cameras.is_empty() {
            bail!("at least one camera is required");
        }
        if w.width < 16 || w.height < 16 {
            bail!("frames must be at least 16x16");
        }
        if !(w.frame_interval_s > 0.0) || !(w.day_length_s >= w.frame_interval_s) {
            bail!("need 0 < frame_interval_s <= day_length_s");
        }
        for c in &w.cameras {
            if !(0.0..=1.0).contains(&c.coverage) || !(c.range_scale > 0.0) {
                bail!("camera {}: coverage must be in [0, 1] and range_scale positive", c.id);
            }
        }
        if w.range_m[0] <= 0.0 || w.range_m[1] < w.range_m[0] {
            bail!("range_m must be an increasing positive interval");
        }
        if self.days_per_iteration == 0 {
            bail!("days_per_iteration must be at least 1");
        }
        if let Some(f) = self.edge_score_floor {
            if !(f > 0.0 && f < 1.0) {
                bail!("edge_score_floor must be in (0, 1)");
            }
        }
        if !(0.0..1.0).contains(&self.frozen_fraction) {
            bail!("frozen_fraction must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.transport.loss_rate) {
            bail!("transport loss_rate must be in [0, 1)");
        }
        if self.transport.frames_per_message == 0 || self.transport.window == 0 {
            bail!("transport window and frames_per_message must be positive");
        }
        if self.stage1.web_images == 0 {
            bail!("stage 1 needs at least one web image");
        }
        if self.eval.frames_per_case == 0 || self.eval.roc_steps == 0 {
            bail!("eval frames_per_case and roc_steps must be positive");
        }
        if self.labelling.stage2.score_threshold < self.stage1.lanms.score_threshold {
            bail!("stage-2 pseudo-label threshold is below the stage-1 threshold");
        }
        self.labelling.load_hierarchy()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ScenarioConfig::load("default").unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: ScenarioConfig = serde_json::from_str(r#"{"iterations": 2, "world": {"sightings_per_week": 0}}"#).unwrap();
        assert_eq!(c.iterations, 2);
        assert_eq!(c.world.sightings_per_week, 0.0);
        assert_eq!(c.world.width, 96);
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"iteratons": 2}"#).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ScenarioConfig::default();
        c.world.sightings_per_week = -1.0;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::default();
        c.world.drift_day = Some(1000.0);
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::default();
        c.labelling.stage2.score_threshold = 0.3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn bundled_hierarchy_expands_cassowary() {
        let h = LabellingConfig::default().load_hierarchy().unwrap();
        let set = rads_core::label::expand_labels(&h, "cassowary", 1, false).unwrap();
        for l in ["flightless bird", "ratite", "ratite bird"] {
            assert!(set.labels().iter().any(|x| x == l), "{l}");
        }
        let sofa = rads_core::label::expand_labels(&h, "sofa", 1, false).unwrap();
        for l in ["studio couch", "day bed", "park bench"] {
            assert!(sofa.labels().iter().any(|x| x == l), "{l}");
        }
    }
}
