//! LA-NMS ablation: pseudo-label quality with and without label
//! augmentation, against ground truth, across score thresholds.

use anyhow::Result;
use rads_core::eval::{average_precision, ImageBox, MATCH_IOU};
use rads_core::label::{la_nms, LaNmsParams, OracleConfig, SimulatedOracleBackend};
use rads_core::math::{derive_seed, hash_str};
use rads_core::raster::Modality;
use rads_core::{BBox, ScoredBox};
use serde::{Deserialize, Serialize};

use crate::config::{ablation_affinities, ScenarioConfig};
use crate::evaluation::EvalStream;
use crate::world::World;

pub const THRESHOLDS: [f64; 5] = [0.3, 0.5, 0.6, 0.7, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub threshold: f64,
    pub augmented_map: f64,
    pub plain_map: f64,
}

/// Labels every RGB evaluation frame (positives and dry negatives) with an
/// oracle whose target label is weak on true instances and a child label
/// strong, then scores both variants with AP@0.5 against ground truth.
pub fn run(cfg: &ScenarioConfig, world: &World, stream: &EvalStream, thresholds: &[f64]) -> Result<Vec<AblationRow>> {
    let oracle = SimulatedOracleBackend::new(OracleConfig {
        affinity: ablation_affinities(),
        seed: derive_seed(cfg.seed, &[hash_str("ablation")]),
        ..cfg.labelling.oracle.clone()
    })?;
    let hierarchy = cfg.labelling.load_hierarchy()?;
    let target = &cfg.labelling.target;
    let frames: Vec<_> = stream.frames.values().filter(|f| f.modality == Modality::Rgb && !f.id.contains("-wet-")).collect();
    let gt: Vec<ImageBox<BBox>> = frames
        .iter()
        .flat_map(|f| f.gt.iter().map(|b| ImageBox { image: f.id.clone(), item: *b }))
        .collect();
    let augmented = LaNmsParams { use_descriptors: false, ..LaNmsParams::default() };
    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut map = [0.0; 2];
        for (k, base) in [augmented, augmented.plain()].into_iter().enumerate() {
            let params = LaNmsParams { score_threshold: t, ..base };
            let mut dets: Vec<ImageBox<ScoredBox>> = Vec::new();
            for f in &frames {
                let scene = world.oracle_scene(&f.scene, world.dims());
                let set = la_nms(&f.id, &scene, target, &hierarchy, &oracle, &params)?;
                dets.extend(set.boxes.into_iter().map(|b| ImageBox { image: f.id.clone(), item: b }));
            }
            map[k] = average_precision(&dets, &gt, MATCH_IOU);
        }
        rows.push(AblationRow { threshold: t, augmented_map: map[0], plain_map: map[1] });
    }
    Ok(rows)
}
