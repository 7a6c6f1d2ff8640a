//! The fixed held-out evaluation stream and per-model scoring on it.

use std::collections::BTreeMap;

use anyhow::{Context, Result};
use rads_core::detector::ToyDetector;
use rads_core::eval::{
    average_precision, fpr, frame_tpr, match_detections, mtpr, roc_points, select_operating_point, EvaluationDataset,
    FrameResult, ImageBox, RangeGroup, RocPoint, SightingCase, MATCH_IOU,
};
use rads_core::math::{hash_str, rng_for};
use rads_core::raster::{Modality, RasterImage};
use rads_core::{BBox, ScoredBox};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::world::{ground_truth, ObjectClass, Scene, SceneItem, World, SECONDS_PER_DAY};

/// Evaluation frames are stamped far past any run so their ids and times
/// never collide with the field stream.
const EVAL_DAY: f64 = 100_000.0;

#[derive(Debug, Clone)]
pub struct EvalFrame {
    pub id: String,
    pub modality: Modality,
    pub image: RasterImage,
    /// Target boxes only.
    pub gt: Vec<BBox>,
    pub scene: Scene,
}

/// Labelled frames of one modality.
#[derive(Debug, Clone)]
pub struct ModalitySet {
    pub modality: Modality,
    pub dataset: EvaluationDataset,
    /// Target-free frames captured after the weather drift.
    pub wet_negatives: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EvalStream {
    pub target: String,
    pub frames: BTreeMap<String, EvalFrame>,
    pub sets: Vec<ModalitySet>,
}

fn cameras_of(world: &World, m: Modality) -> Vec<usize> {
    (0..world.config.cameras.len()).filter(|&c| world.camera(c).modality == m).collect()
}

fn distractor(world: &World, rng: &mut impl Rng, camera: usize, t: f64) -> Option<SceneItem> {
    if !rng.random_bool(0.3) {
        return None;
    }
    let class = [ObjectClass::Vehicle, ObjectClass::Person, ObjectClass::Pig][rng.random_range(0..3)];
    let [lo, hi] = world.config.range_m;
    let range = rng.random_range(lo..=hi);
    let w = world.pixel_height(class, range) * 2.0;
    let x = rng.random_range(0.0..=(f64::from(world.config.width) - w).max(0.0));
    let color = [rng.random(), rng.random(), rng.random()];
    Some(world.item(camera, class, range, x, rng.random(), t, rng.random_range(0.85..1.2), color))
}

fn stumps(world: &World, rng: &mut impl Rng, camera: usize) -> Vec<SceneItem> {
    let n = crate::world::poisson(rng, world.config.stumps_per_day).max(1);
    (0..n)
        .map(|_| {
            let range = rng.random_range(30.0..120.0);
            let w = world.pixel_height(ObjectClass::Stump, range);
            let x = rng.random_range(0.0..=(f64::from(world.config.width) - w).max(0.0));
            world.item(camera, ObjectClass::Stump, range, x, false, 0.0, rng.random_range(0.85..1.2), [0; 3])
        })
        .collect()
}

impl EvalStream {
    /// Built from `(config, seed)` alone, so every model version of a run
    /// (and a later `evaluate`) sees the same frames.
    pub fn generate(cfg: &ScenarioConfig, world: &World) -> Result<Self> {
        let mut frames = BTreeMap::new();
        let mut sets = Vec::new();
        let e = &cfg.eval;
        let interval = world.config.frame_interval_s;
        let target = cfg.labelling.target.clone();
        for (m, per_group, negatives) in [
            (Modality::Rgb, e.cases_per_group, e.negatives),
            (Modality::Thermal, e.thermal_cases_per_group, e.thermal_negatives),
        ] {
            let cams = cameras_of(world, m);
            if cams.is_empty() || (per_group == 0 && negatives == 0) {
                continue;
            }
            let tag = if m == Modality::Rgb { "rgb" } else { "thermal" };
            let mut cases = Vec::new();
            let mut ground = BTreeMap::new();
            for (g, group) in [RangeGroup::Near, RangeGroup::Far].into_iter().enumerate() {
                for i in 0..per_group {
                    let mut rng = rng_for(world.seed, &[hash_str("eval-case"), hash_str(tag), g as u64, i as u64]);
                    let cam = cams[i % cams.len()];
                    let [lo, hi] = world.config.range_m;
                    let range = match group {
                        RangeGroup::Near => rng.random_range(lo..100.0f64.max(lo + 1.0)),
                        RangeGroup::Far => rng.random_range(100.0..hi.max(101.0)),
                    };
                    let h = world.pixel_height(ObjectClass::Cassowary, range);
                    let span = (f64::from(world.config.width) - 0.7 * h).max(0.0);
                    let (x0, x1) = (rng.random_range(0.0..=span), rng.random_range(0.0..=span));
                    let tone = rng.random_range(0.85..1.25);
                    let light: f64 = rng.random_range(0.8..1.05);
                    let t0 = EVAL_DAY * SECONDS_PER_DAY
                        + world.config.day_start_s
                        + rng.random_range(0.0..world.config.day_length_s * 0.9);
                    let n = e.frames_per_case;
                    let mut other = distractor(world, &mut rng, cam, t0);
                    let id = format!("eval-{tag}-{}-{i}", group.as_str());
                    let mut frame_ids = Vec::new();
                    for k in 0..n {
                        let t = t0 + k as f64 * interval;
                        let u = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
                        let bird = world.item(
                            cam,
                            ObjectClass::Cassowary,
                            range,
                            x0 + (x1 - x0) * u,
                            x1 < x0,
                            t * 1.7,
                            tone,
                            [0; 3],
                        );
                        if let Some(d) = other.as_mut() {
                            d.phase = t * 2.3;
                        }
                        let items: Vec<SceneItem> = other.iter().cloned().chain([bird]).collect();
                        let scene = Scene {
                            backdrop: crate::world::Backdrop::Camera(cam),
                            modality: m,
                            time: t,
                            light: world.light_at(light, t),
                            wet: false,
                            noise_seed: rng.random(),
                            items,
                        };
                        let fid = format!("{id}-{k}");
                        let frame = make_frame(world, &fid, scene, &target);
                        anyhow::ensure!(!frame.gt.is_empty(), "evaluation case frame {fid} lost its target");
                        ground.insert(fid.clone(), frame.gt.clone());
                        frames.insert(fid.clone(), frame);
                        frame_ids.push(fid);
                    }
                    cases.push(SightingCase { id, frame_ids, range_group: group, modality: m });
                }
            }
            let mut negative_frames = Vec::new();
            let mut wet_negatives = Vec::new();
            let wet_too = world.config.drift_day.is_some();
            for (wet, list) in [(false, &mut negative_frames), (true, &mut wet_negatives)] {
                if wet && !wet_too {
                    continue;
                }
                for i in 0..negatives {
                    let mut rng = rng_for(world.seed, &[hash_str("eval-neg"), hash_str(tag), u64::from(wet), i as u64]);
                    let cam = cams[i % cams.len()];
                    let t = EVAL_DAY * SECONDS_PER_DAY
                        + world.config.day_start_s
                        + rng.random_range(0.0..world.config.day_length_s);
                    let mut items: Vec<SceneItem> = distractor(world, &mut rng, cam, t).into_iter().collect();
                    if wet {
                        items.extend(stumps(world, &mut rng, cam));
                    }
                    let light: f64 = rng.random_range(0.8..1.05);
                    let scene = Scene {
                        backdrop: crate::world::Backdrop::Camera(cam),
                        modality: m,
                        time: t,
                        light: world.light_at(light, t),
                        wet,
                        noise_seed: rng.random(),
                        items,
                    };
                    let fid = format!("eval-{tag}-{}-{i}", if wet { "wet" } else { "dry" });
                    frames.insert(fid.clone(), make_frame(world, &fid, scene, &target));
                    list.push(fid);
                }
            }
            let dataset = EvaluationDataset { positive_cases: cases, negative_frames, ground_truth: ground };
            dataset.validate().context("evaluation dataset")?;
            sets.push(ModalitySet { modality: m, dataset, wet_negatives });
        }
        Ok(Self { target, frames, sets })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

fn make_frame(world: &World, id: &str, scene: Scene, target: &str) -> EvalFrame {
    let image = world.render(&scene);
    let gt = ground_truth(&scene, image.dims()).into_iter().filter(|g| g.class == target).map(|g| g.bbox).collect();
    EvalFrame { id: id.into(), modality: scene.modality, image, gt, scene }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

/// One model's figures on one modality of the evaluation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEval {
    pub modality: Modality,
    /// Operating-point threshold: every rate below is measured at it.
    pub threshold: f64,
    /// The model's own threshold, fitted at training time.
    pub calibrated_threshold: f64,
    pub mtpr_near: Option<f64>,
    pub mtpr_far: Option<f64>,
    pub mtpr: Option<f64>,
    pub fpr_dry: Option<f64>,
    pub fpr_wet: Option<f64>,
    pub map50: Option<f64>,
    pub operating_point: Option<RocPoint>,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
}

/// Every modality's cases and negatives together, each scored at its own
/// operating point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PooledEval {
    pub mtpr_near: Option<f64>,
    pub mtpr_far: Option<f64>,
    pub mtpr: Option<f64>,
    pub fpr_dry: Option<f64>,
    pub fpr_wet: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub version: u64,
    pub pooled: PooledEval,
    pub modalities: Vec<ModalityEval>,
}

impl ModelEval {
    pub fn get(&self, m: Modality) -> Option<&ModalityEval> {
        self.modalities.iter().find(|e| e.modality == m)
    }
}

/// Lowest score the evaluation looks at.
pub const ROC_FLOOR: f64 = 0.5;

/// ROC thresholds: evenly spaced over [ROC_FLOOR, 1].
pub fn roc_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| ROC_FLOOR + (1.0 - ROC_FLOOR) * i as f64 / steps as f64).collect()
}

/// Scores `det` on every frame of the stream.
pub fn evaluate_model(det: &ToyDetector, stream: &EvalStream, cfg: &ScenarioConfig) -> Result<ModelEval> {
    let mut modalities = Vec::new();
    let mut cases = Vec::new();
    let mut tprs_all = BTreeMap::new();
    let (mut dry, mut wet) = (Vec::new(), Vec::new());
    let mut kept_all = BTreeMap::new();
    for set in &stream.sets {
        let m = set.modality;
        let Some(mp) = det.params().modality(m) else { continue };
        let Some(class) = mp.classes.iter().find(|c| c.label == stream.target) else { continue };
        let calibrated_threshold = class.threshold;
        let ds = &set.dataset;
        let ids = ds
            .positive_cases
            .iter()
            .flat_map(|c| c.frame_ids.iter())
            .chain(&ds.negative_frames)
            .chain(&set.wet_negatives);
        let mut all: BTreeMap<String, Vec<ScoredBox>> = BTreeMap::new();
        for id in ids {
            let f = &stream.frames[id];
            let found = det.detect(&f.image, Some(ROC_FLOOR))?;
            all.insert(id.clone(), found.into_iter().filter(|d| d.label == stream.target).collect());
        }
        let result = |id: &String| FrameResult {
            frame: id.clone(),
            detections: all[id].clone(),
            gt: ds.ground_truth.get(id).cloned().unwrap_or_default(),
        };
        let positives: Vec<FrameResult> = ds.ground_truth.keys().map(result).collect();
        let negatives: Vec<FrameResult> = ds.negative_frames.iter().map(result).collect();
        let roc = roc_points(&positives, &negatives, &roc_grid(cfg.eval.roc_steps))?;
        let operating_point = select_operating_point(&roc, cfg.eval.fpr_cutoff).ok();
        let threshold = operating_point.map_or(calibrated_threshold, |p| p.threshold);

        let kept: BTreeMap<String, Vec<ScoredBox>> = all
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().filter(|d| d.score >= threshold).cloned().collect()))
            .collect();
        let mut tprs = BTreeMap::new();
        for (id, gt) in &ds.ground_truth {
            tprs.insert(id.clone(), frame_tpr(&kept[id], gt, MATCH_IOU)?);
        }
        let group = |g| mtpr(&ds.positive_cases, &tprs, g).ok();
        let rate = |neg: &[String]| if neg.is_empty() { None } else { fpr(neg, &kept, &stream.target).ok() };
        cases.extend(ds.positive_cases.iter().cloned());
        tprs_all.extend(tprs.iter().map(|(k, v)| (k.clone(), *v)));
        dry.extend(ds.negative_frames.iter().cloned());
        wet.extend(set.wet_negatives.iter().cloned());
        kept_all.extend(ds.negative_frames.iter().chain(&set.wet_negatives).map(|id| (id.clone(), kept[id].clone())));

        let (map50, pr) = precision_recall(&positives, &negatives);
        modalities.push(ModalityEval {
            modality: m,
            threshold,
            calibrated_threshold,
            mtpr_near: group(Some(RangeGroup::Near)),
            mtpr_far: group(Some(RangeGroup::Far)),
            mtpr: group(None),
            fpr_dry: rate(&ds.negative_frames),
            fpr_wet: rate(&set.wet_negatives),
            map50,
            operating_point,
            roc,
            pr,
        });
    }
    let group = |g| mtpr(&cases, &tprs_all, g).ok();
    let rate = |neg: &[String]| if neg.is_empty() { None } else { fpr(neg, &kept_all, &stream.target).ok() };
    let pooled = PooledEval {
        mtpr_near: group(Some(RangeGroup::Near)),
        mtpr_far: group(Some(RangeGroup::Far)),
        mtpr: group(None),
        fpr_dry: rate(&dry),
        fpr_wet: rate(&wet),
    };
    Ok(ModelEval { version: det.params().version, pooled, modalities })
}

/// AP@0.5 over positive and dry negative frames, and the PR curve behind it.
fn precision_recall(positives: &[FrameResult], negatives: &[FrameResult]) -> (Option<f64>, Vec<PrPoint>) {
    let dets: Vec<ImageBox<ScoredBox>> = positives
        .iter()
        .chain(negatives)
        .flat_map(|f| f.detections.iter().map(|d| ImageBox { image: f.frame.clone(), item: d.clone() }))
        .collect();
    let gt: Vec<ImageBox<BBox>> = positives
        .iter()
        .flat_map(|f| f.gt.iter().map(|b| ImageBox { image: f.frame.clone(), item: *b }))
        .collect();
    if gt.is_empty() {
        return (None, Vec::new());
    }
    let ap = average_precision(&dets, &gt, MATCH_IOU);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].item.score.total_cmp(&dets[a].item.score).then(a.cmp(&b)));
    let sorted: Vec<ImageBox<ScoredBox>> = order.iter().map(|&i| dets[i].clone()).collect();
    let tp = match_detections(&sorted, &gt, MATCH_IOU);
    let mut pr = Vec::with_capacity(sorted.len());
    let mut hits = 0usize;
    for (k, (d, hit)) in sorted.iter().zip(&tp).enumerate() {
        hits += usize::from(*hit);
        pr.push(PrPoint {
            score: d.item.score,
            recall: hits as f64 / gt.len() as f64,
            precision: hits as f64 / (k + 1) as f64,
        });
    }
    (Some(ap), pr)
}
