//! The two-stage loop: stage-1 training on synthetic composites, then
//! rounds of edge capture, upload, pseudo-labelling, curation and
//! fine-tuning, with every version scored on the fixed evaluation stream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use rads_core::cloud::{
    curate_training_set, fine_tune, pseudo_label_batch, ManifestEntry, ModelRegistry, ModelVersion, Source,
    TrainingConfig, TrainingManifest,
};
use rads_core::detector::{DetectorModel, ToyDetector, ToyDetectorParams};
use rads_core::edge::{DetectionEvent, EdgeNode, UploadBatch};
use rads_core::eval::{classify_events, EventCounts, Span, MATCH_IOU};
use rads_core::label::{la_nms, LabelHierarchy, OracleScene, PseudoLabelSet, SimulatedOracleBackend};
use rads_core::math::{budget_count, derive_seed, hash_str};
use rads_core::raster::{Modality, RasterImage};
use rads_core::synth::{extract_instance, generate_synthetic_set, Background, OtsuMaskProvider, SyntheticSample};
use rads_core::wire::{BandwidthLedger, MessageKind, SessionStats};
use rads_core::{BBox, ScoredBox};
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::evaluation::{evaluate_model, EvalStream, ModelEval};
use crate::transport::{
    decode_frame_batch, encode_frame_batch, BatchHeader, LossyPipe, Medium, Session, TcpMedium, Timing,
};
use crate::world::{DaySchedule, FrameKey, World, SECONDS_PER_DAY};
use crate::{edgelog, report, state};

/// Target-free captures used as stage-1 negatives start at this survey index,
/// clear of the composite backgrounds.
const NEGATIVE_SURVEY_OFFSET: u64 = 10_000;

/// Modalities the scenario trains: thermal only with thermal cameras and
/// `stage1.thermal` set.
pub fn modalities(world: &World, cfg: &ScenarioConfig) -> Vec<Modality> {
    let mut out = Vec::new();
    for m in [Modality::Rgb, Modality::Thermal] {
        let present = world.config.cameras.iter().any(|c| c.modality == m);
        if present && (m == Modality::Rgb || cfg.stage1.thermal) {
            out.push(m);
        }
    }
    out
}

fn modality_tag(m: Modality) -> &'static str {
    crate::report::modality_name(m)
}

/// Stage-1 composites for one modality: web photos pseudo-labelled with
/// LA-NMS, masked, and pasted onto target-free captures from that
/// modality's cameras.
pub fn synthesize(
    cfg: &ScenarioConfig,
    world: &World,
    hierarchy: &LabelHierarchy,
    oracle: &SimulatedOracleBackend,
    m: Modality,
) -> Result<Vec<SyntheticSample>> {
    let s1 = &cfg.stage1;
    let tag = modality_tag(m);
    let mut instances = Vec::new();
    for i in 0..s1.web_images {
        let scene = world.web_scene(m, i as u64);
        let img = world.render(&scene);
        let id = format!("web-{tag}-{i}");
        let oracle_scene = world.oracle_scene(&scene, img.dims());
        let labels = la_nms(&id, &oracle_scene, &cfg.labelling.target, hierarchy, oracle, &s1.lanms)?;
        for b in &labels.boxes {
            if let Ok(inst) = extract_instance(&img, &b.bbox, &OtsuMaskProvider, &id, &cfg.labelling.target) {
                instances.push(inst);
            }
        }
    }
    let mut backgrounds = Vec::new();
    for c in (0..world.config.cameras.len()).filter(|&c| world.camera(c).modality == m) {
        for n in 0..s1.backgrounds_per_camera as u64 {
            let img = world.render(&world.survey_scene(c, n));
            backgrounds.push(Background { id: format!("bg-{}-{n}", world.camera(c).id), image: img });
        }
    }
    let seed = derive_seed(cfg.seed, &[hash_str("synth"), u64::from(m.channels())]);
    generate_synthetic_set(&instances, &backgrounds, s1.synthetic_images, &s1.placement, seed)
        .with_context(|| format!("stage-1 {tag} composites"))
}

/// The labelling backend of a scenario, seeded from the run seed.
pub fn oracle_for(cfg: &ScenarioConfig) -> Result<SimulatedOracleBackend> {
    let mut oracle_cfg = cfg.labelling.oracle.clone();
    oracle_cfg.seed = derive_seed(cfg.seed, &[hash_str("oracle"), oracle_cfg.seed]);
    Ok(SimulatedOracleBackend::new(oracle_cfg)?)
}

/// Per-day schedules, computed once.
#[derive(Default)]
struct Schedules(BTreeMap<u32, DaySchedule>);

impl Schedules {
    fn get<'a>(&'a mut self, world: &World, day: u32) -> &'a DaySchedule {
        self.0.entry(day).or_insert_with(|| world.schedule(day))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    pub images: usize,
    pub positive_images: usize,
    pub boxes: usize,
    /// Visible targets in the uploaded frames.
    pub targets: usize,
    /// Pseudo-label boxes at IoU >= 0.5 with a visible target.
    pub correct_boxes: usize,
}

/// What the edge reports at the end of a round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeSummary {
    pub iteration: u64,
    pub deployed_version: u64,
    pub frames_observed: usize,
    pub detection_frames: usize,
    pub frames_uploaded: usize,
    pub upload_bytes: u64,
    pub upload_messages: usize,
    pub budget_windows: u32,
    pub events: Vec<DetectionEvent>,
    /// Wall-clock seconds spent simulating and ingesting; not part of the report.
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub version: ModelVersion,
    pub stage: u8,
    pub training_images: usize,
    pub field_entries: usize,
    pub eval: ModelEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub days: [u32; 2],
    pub deployed_version: u64,
    pub trained_version: u64,
    pub frames_observed: usize,
    pub detection_frames: usize,
    pub frames_uploaded: usize,
    pub upload_bytes: u64,
    pub upload_messages: usize,
    pub budget_windows: u32,
    pub pseudo_labels: PseudoLabelStats,
    pub events: EventCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub frames_observed: usize,
    pub frames_uploaded: usize,
    /// `ceil(budget_fraction * frames_observed)`.
    pub upload_cap: usize,
    pub events: EventCounts,
    pub event_precision: Option<f64>,
    pub event_recall: Option<f64>,
}

/// Deterministic outcome of a run: byte-identical for equal config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub target: String,
    pub versions: Vec<VersionRecord>,
    pub iterations: Vec<IterationRecord>,
    pub events_per_day: BTreeMap<u64, EventCounts>,
    pub totals: Totals,
}

impl RunReport {
    pub fn eval(&self, version: u64) -> Option<&ModelEval> {
        self.versions.iter().find(|v| v.version.id == version).map(|v| &v.eval)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTimings {
    pub edge_s: f64,
    pub label_s: f64,
    pub train_s: f64,
    pub eval_s: f64,
}

/// Wall-clock and link statistics; kept out of the report because they vary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub eval_stream_s: f64,
    pub stage1_s: f64,
    pub iterations: Vec<IterationTimings>,
    pub total_s: f64,
    pub cloud_session: SessionStats,
    pub edge_session: SessionStats,
}

pub struct RunOutput {
    pub report: RunReport,
    pub timings: Timings,
}

/// Cloud-side state: world access for the labelling oracle, the training
/// store, manifest, registry and evaluation.
pub struct Cloud {
    cfg: ScenarioConfig,
    world: World,
    hierarchy: LabelHierarchy,
    oracle: SimulatedOracleBackend,
    stream: EvalStream,
    schedules: Schedules,
    pub params: ToyDetectorParams,
    pub manifest: TrainingManifest,
    pub registry: ModelRegistry,
    images: BTreeMap<String, RasterImage>,
    models: BTreeMap<u64, ToyDetectorParams>,
    versions: Vec<VersionRecord>,
    iterations: Vec<IterationRecord>,
    events_per_day: BTreeMap<u64, EventCounts>,
    totals: Totals,
    pub timings: Timings,
}

impl Cloud {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let world = World::new(cfg.world.clone(), cfg.seed);
        let hierarchy = cfg.labelling.load_hierarchy()?;
        let oracle = oracle_for(&cfg)?;
        let t = Instant::now();
        let stream = EvalStream::generate(&cfg, &world)?;
        let mut curation = cfg.curation;
        curation.seed = derive_seed(cfg.seed, &[hash_str("curation"), curation.seed]);
        let timings = Timings { eval_stream_s: t.elapsed().as_secs_f64(), ..Timings::default() };
        Ok(Self {
            params: ToyDetectorParams::untrained(cfg.detector.clone()),
            manifest: TrainingManifest::new(curation)?,
            cfg,
            world,
            hierarchy,
            oracle,
            stream,
            schedules: Schedules::default(),
            registry: ModelRegistry::default(),
            images: BTreeMap::new(),
            models: BTreeMap::new(),
            versions: Vec::new(),
            iterations: Vec::new(),
            events_per_day: BTreeMap::new(),
            totals: Totals::default(),
            timings,
        })
    }

    pub fn stream(&self) -> &EvalStream {
        &self.stream
    }

    /// A training image held by the cloud.
    pub fn image(&self, id: &str) -> Option<RasterImage> {
        self.images.get(id).cloned()
    }

    pub fn models(&self) -> &BTreeMap<u64, ToyDetectorParams> {
        &self.models
    }

    /// Web photos -> LA-NMS -> masked instances -> composites on field
    /// backgrounds -> model v1 trained from scratch.
    pub fn run_stage1(&mut self) -> Result<u64> {
        let t = Instant::now();
        let cfg = self.cfg.clone();
        let s1 = &cfg.stage1;
        for m in modalities(&self.world, &cfg) {
            let tag = modality_tag(m);
            let samples = synthesize(&cfg, &self.world, &self.hierarchy, &self.oracle, m)?;
            let cams: Vec<usize> =
                (0..self.world.config.cameras.len()).filter(|&c| self.world.camera(c).modality == m).collect();
            for (i, s) in samples.into_iter().enumerate() {
                let id = format!("syn-{tag}-{i}");
                self.manifest.add_fixed(ManifestEntry {
                    image: id.clone(),
                    source: Source::Synthetic,
                    modality: m,
                    labels: s.labels,
                    iteration: 0,
                })?;
                self.images.insert(id, s.image);
            }
            for &c in &cams {
                for n in 0..s1.negatives_per_camera as u64 {
                    let id = format!("survey-{}-{n}", self.world.camera(c).id);
                    let img = self.world.render(&self.world.survey_scene(c, NEGATIVE_SURVEY_OFFSET + n));
                    self.manifest.add_fixed(ManifestEntry {
                        image: id.clone(),
                        source: Source::Field,
                        modality: m,
                        labels: Vec::new(),
                        iteration: 0,
                    })?;
                    self.images.insert(id, img);
                }
            }
        }
        let version = self.train_round(0.0, 1)?;
        self.timings.stage1_s = t.elapsed().as_secs_f64();
        Ok(version)
    }

    /// Fine-tunes every modality on the current manifest, scores the result
    /// and publishes it as one new version.
    fn train_round(&mut self, frozen_fraction: f64, stage: u8) -> Result<u64> {
        let t = Instant::now();
        let mut params = self.params.clone();
        let mut first: Option<ModelVersion> = None;
        for m in modalities(&self.world, &self.cfg) {
            let has_entries = self.manifest.training_entries().any(|e| e.modality == m);
            if !has_entries {
                continue;
            }
            // A modality never trained before starts from scratch.
            let ff = if params.modality(m).is_some() { frozen_fraction } else { 0.0 };
            let training = TrainingConfig { frozen_fraction: ff, modality: m };
            let (next, version) = fine_tune(&params, &self.manifest, training, &self.images)?;
            params = ToyDetectorParams { version: params.version, ..next };
            if first.is_none() {
                first = Some(version);
            }
        }
        let mut version = first.ok_or_else(|| anyhow!("manifest has no trainable entries"))?;
        params.version = self.params.version + 1;
        version.id = params.version;
        version.parent = (self.params.version > 0).then_some(self.params.version);
        let train_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let det = ToyDetector::new(params.clone());
        let eval = evaluate_model(&det, &self.stream, &self.cfg)?;
        let pooled = eval.pooled;
        version.metrics.mtpr_near = pooled.mtpr_near;
        version.metrics.mtpr_far = pooled.mtpr_far;
        version.metrics.mtpr = pooled.mtpr;
        version.metrics.fpr = pooled.fpr_dry;
        version.metrics.map50 = eval.get(Modality::Rgb).and_then(|m| m.map50);
        let eval_s = t.elapsed().as_secs_f64();
        self.registry.register(version.clone())?;
        self.registry.publish(version.id)?;
        self.versions.push(VersionRecord {
            version: version.clone(),
            stage,
            training_images: self.manifest.training_entries().count(),
            field_entries: self.manifest.field_count(),
            eval,
        });
        self.models.insert(params.version, params.clone());
        self.params = params;
        if stage == 2 {
            if let Some(it) = self.timings.iterations.last_mut() {
                it.train_s = train_s;
                it.eval_s = eval_s;
            }
        }
        Ok(version.id)
    }

    pub fn model_blob(&self) -> Vec<u8> {
        self.params.to_blob()
    }

    fn oracle_scene_for(&mut self, id: &str) -> Option<(OracleScene, Vec<BBox>)> {
        let key = self.world.parse_frame_id(id)?;
        let world = &self.world;
        let schedule = self.schedules.get(world, key.day);
        let scene = world.scene(key, schedule);
        let dims = world.dims();
        let target = &self.cfg.labelling.target;
        let gt = crate::world::ground_truth(&scene, dims)
            .into_iter()
            .filter(|g| &g.class == target)
            .map(|g| g.bbox)
            .collect();
        Some((world.oracle_scene(&scene, dims), gt))
    }

    /// One stage-2 round on the cloud: label the upload, curate, fine-tune,
    /// publish. Returns the new version id.
    pub fn on_upload(
        &mut self,
        batch: UploadBatch,
        images: BTreeMap<String, RasterImage>,
        summary: &EdgeSummary,
    ) -> Result<u64> {
        let iteration = summary.iteration;
        self.timings.iterations.push(IterationTimings { edge_s: summary.elapsed_s, ..IterationTimings::default() });
        let t = Instant::now();
        let mut scenes = BTreeMap::new();
        let mut truth = BTreeMap::new();
        for c in &batch.frames {
            let (scene, gt) = self
                .oracle_scene_for(&c.frame.id)
                .ok_or_else(|| anyhow!("uploaded frame {} is not from this world", c.frame.id))?;
            scenes.insert(c.frame.id.clone(), scene);
            truth.insert(c.frame.id.clone(), gt);
        }
        let stage1 = self.cfg.stage1.lanms.score_threshold;
        let sets = pseudo_label_batch(
            &batch,
            |id: &str| scenes.get(id).cloned(),
            &self.cfg.labelling.target,
            &self.hierarchy,
            &self.oracle,
            &self.cfg.labelling.stage2,
            stage1,
        )?;
        let stats = label_stats(&sets, &truth);
        let mut manifest = self.manifest.clone();
        for m in modalities(&self.world, &self.cfg) {
            let mine: Vec<PseudoLabelSet> = sets
                .iter()
                .filter(|s| images.get(&s.image).is_some_and(|i| i.modality() == m))
                .cloned()
                .collect();
            manifest = curate_training_set(&manifest, &mine, m, iteration)?;
        }
        let stamp = manifest.iteration;
        ensure!(stamp == iteration || sets.is_empty() || modalities(&self.world, &self.cfg).is_empty());
        manifest.iteration = iteration;
        self.manifest = manifest;
        let live: std::collections::BTreeSet<&str> = self.manifest.entries.iter().map(|e| e.image.as_str()).collect();
        let fresh: Vec<(String, RasterImage)> =
            images.into_iter().filter(|(id, _)| live.contains(id.as_str())).collect();
        self.images.retain(|id, _| live.contains(id.as_str()));
        self.images.extend(fresh);
        if let Some(it) = self.timings.iterations.last_mut() {
            it.label_s = t.elapsed().as_secs_f64();
        }

        let deployed = summary.deployed_version;
        let version = self.train_round(self.cfg.frozen_fraction, 2)?;

        let first_day = (iteration - 1) as u32 * self.cfg.days_per_iteration;
        let last_day = first_day + self.cfg.days_per_iteration;
        let mut sightings = Vec::new();
        for day in first_day..last_day {
            let world = &self.world;
            for s in &self.schedules.get(world, day).sightings {
                sightings.push(Span::new(s.start, s.end())?);
            }
        }
        let spans: Vec<Span> =
            summary.events.iter().map(|e| Span::new(e.trigger, e.end)).collect::<Result<_, _>>()?;
        let classified = classify_events(&spans, &sightings);
        for (day, c) in &classified.per_day {
            let d = self.events_per_day.entry(*day).or_default();
            d.tp += c.tp;
            d.fp += c.fp;
            d.fn_ += c.fn_;
        }
        let t = &mut self.totals;
        t.frames_observed += summary.frames_observed;
        t.frames_uploaded += summary.frames_uploaded;
        t.events.tp += classified.totals.tp;
        t.events.fp += classified.totals.fp;
        t.events.fn_ += classified.totals.fn_;
        self.iterations.push(IterationRecord {
            iteration,
            days: [first_day, last_day],
            deployed_version: deployed,
            trained_version: version,
            frames_observed: summary.frames_observed,
            detection_frames: summary.detection_frames,
            frames_uploaded: summary.frames_uploaded,
            upload_bytes: summary.upload_bytes,
            upload_messages: summary.upload_messages,
            budget_windows: summary.budget_windows,
            pseudo_labels: stats,
            events: classified.totals,
        });
        Ok(version)
    }

    pub fn report(&self) -> RunReport {
        let mut totals = self.totals.clone();
        totals.upload_cap = budget_count(self.cfg.edge.upload.budget_fraction, totals.frames_observed);
        let e = totals.events;
        totals.event_precision = rads_core::eval::event_precision_recall(e.tp, e.fn_, e.fp).ok().map(|p| p.0);
        totals.event_recall = rads_core::eval::event_precision_recall(e.tp, e.fn_, e.fp).ok().map(|p| p.1);
        if e.tp + e.fp == 0 && e.tp + e.fn_ > 0 {
            totals.event_recall = Some(0.0);
        }
        RunReport {
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            target: self.cfg.labelling.target.clone(),
            versions: self.versions.clone(),
            iterations: self.iterations.clone(),
            events_per_day: self.events_per_day.clone(),
            totals,
        }
    }

    pub fn save_state(&self, dir: &Path) -> Result<()> {
        state::save(dir, &self.manifest, &self.registry, &self.models)
    }
}

fn label_stats(sets: &[PseudoLabelSet], truth: &BTreeMap<String, Vec<BBox>>) -> PseudoLabelStats {
    let mut s = PseudoLabelStats { images: sets.len(), ..PseudoLabelStats::default() };
    for set in sets {
        let gt = truth.get(&set.image).map(Vec::as_slice).unwrap_or(&[]);
        s.targets += gt.len();
        s.boxes += set.boxes.len();
        s.positive_images += usize::from(!set.boxes.is_empty());
        let gt_boxes: Vec<ScoredBox> = set.boxes.clone();
        s.correct_boxes += rads_core::eval::matched_count(&gt_boxes, gt, MATCH_IOU).min(gt_boxes.len());
    }
    s
}

/// The deployed detector as the edge runs it: optionally with a lower
/// score floor than the calibrated thresholds.
struct EdgeModel<'a> {
    det: &'a ToyDetector,
    floor: Option<f64>,
}

impl DetectorModel for EdgeModel<'_> {
    fn version(&self) -> u64 {
        self.det.version()
    }
    fn supports(&self, modality: Modality) -> bool {
        self.det.supports(modality)
    }
    fn infer(&self, image: &RasterImage) -> Result<Vec<ScoredBox>, rads_core::detector::DetectorError> {
        self.det.detect(image, self.floor)
    }
}

/// Field side: cameras, the deployed model, the edge node and its logs.
pub struct Edge {
    cfg: ScenarioConfig,
    world: World,
    node: EdgeNode,
    model: Option<ToyDetector>,
    logs: Option<edgelog::EdgeLogWriter>,
    ledger: BandwidthLedger,
}

pub struct EdgeRound {
    pub messages: Vec<(MessageKind, Vec<u8>)>,
    pub summary: EdgeSummary,
    pub end_time: f64,
}

impl Edge {
    pub fn new(cfg: ScenarioConfig, log_dir: Option<PathBuf>) -> Result<Self> {
        let world = World::new(cfg.world.clone(), cfg.seed);
        let mut edge_cfg = cfg.edge.clone();
        edge_cfg.upload.seed = derive_seed(cfg.seed, &[hash_str("upload"), edge_cfg.upload.seed]);
        let logs = log_dir.map(|d| edgelog::EdgeLogWriter::create(&d, cfg.output.clone())).transpose()?;
        let ledger =
            BandwidthLedger::new(cfg.transport.budget_bytes, cfg.transport.budget_window_s, cfg.world.day_start_s);
        Ok(Self { node: EdgeNode::new(edge_cfg), world, model: None, logs, ledger, cfg })
    }

    pub fn deploy(&mut self, blob: &[u8]) -> Result<u64> {
        let params = ToyDetectorParams::from_blob(blob).context("decoding model update")?;
        let v = params.version;
        self.model = Some(ToyDetector::new(params));
        Ok(v)
    }

    pub fn deployed_version(&self) -> Option<u64> {
        self.model.as_ref().map(DetectorModel::version)
    }

    /// Simulates this round's days, then selects and packs the upload.
    pub fn run_round(&mut self, iteration: u64) -> Result<EdgeRound> {
        let t = Instant::now();
        let model = self.model.clone().ok_or_else(|| anyhow!("no model deployed"))?;
        let edge_model = EdgeModel { det: &model, floor: self.cfg.edge_score_floor };
        let first_day = (iteration - 1) as u32 * self.cfg.days_per_iteration;
        let observed_before = self.node.observed_total();
        let mut detection_frames = 0;
        let events_before = self.node.events().len();
        let log_before = self.node.continuous_log().len();
        let n_cams = self.world.config.cameras.len();
        let mut now = 0.0;
        for day in first_day..first_day + self.cfg.days_per_iteration {
            let schedule = self.world.schedule(day);
            for index in 0..self.world.frames_per_day() {
                for camera in 0..n_cams {
                    let frame = self.world.frame(FrameKey { camera, day, index }, &schedule);
                    let out = self.node.ingest_frame(&frame, &edge_model)?;
                    detection_frames += usize::from(!out.detections.is_empty());
                    if out.logged {
                        if let Some(l) = self.logs.as_mut() {
                            l.continuous_image(&frame)?;
                        }
                    }
                    now = frame.timestamp;
                }
            }
        }
        self.node.finalize(now, true);
        let batch = self.node.take_upload()?;
        let events: Vec<DetectionEvent> = self.node.events()[events_before..].to_vec();
        if let Some(l) = self.logs.as_mut() {
            l.continuous_entries(&self.node.continuous_log()[log_before..])?;
            for e in &events {
                l.event(e, &self.world, &edge_model)?;
            }
        }

        let mut messages = Vec::new();
        let per = self.cfg.transport.frames_per_message;
        let chunks: Vec<_> = if batch.frames.is_empty() {
            vec![&batch.frames[..]]
        } else {
            batch.frames.chunks(per).collect()
        };
        let parts = chunks.len() as u32;
        let mut bytes = 0;
        for (part, chunk) in chunks.into_iter().enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            for c in chunk {
                let key = self
                    .world
                    .parse_frame_id(&c.frame.id)
                    .ok_or_else(|| anyhow!("frame id {} not from this world", c.frame.id))?;
                images.push(self.world.frame(key, &self.world.schedule(key.day)).image);
            }
            let header = BatchHeader {
                iteration,
                part: part as u32,
                parts,
                batch_seq: batch.seq,
                observed: batch.observed,
                frames: chunk.to_vec(),
            };
            let payload = encode_frame_batch(&header, &images)?;
            bytes += payload.len() as u64;
            messages.push((MessageKind::FrameBatch, payload));
        }
        let summary = EdgeSummary {
            iteration,
            deployed_version: model.version(),
            frames_observed: self.node.observed_total() - observed_before,
            detection_frames,
            frames_uploaded: batch.frames.len(),
            upload_bytes: bytes,
            upload_messages: messages.len(),
            budget_windows: 0,
            events,
            elapsed_s: t.elapsed().as_secs_f64(),
        };
        Ok(EdgeRound { messages, summary, end_time: now })
    }

    pub fn uploaded_total(&self) -> usize {
        self.node.uploaded_total()
    }

    pub fn observed_total(&self) -> usize {
        self.node.observed_total()
    }
}

fn assemble_upload(parts: Vec<(BatchHeader, Vec<RasterImage>)>) -> Result<(UploadBatch, BTreeMap<String, RasterImage>)> {
    let first = parts.first().ok_or_else(|| anyhow!("empty upload"))?;
    let (seq, observed) = (first.0.batch_seq, first.0.observed);
    let mut frames = Vec::new();
    let mut images = BTreeMap::new();
    for (h, imgs) in parts {
        for (c, img) in h.frames.into_iter().zip(imgs) {
            images.insert(c.frame.id.clone(), img);
            frames.push(c);
        }
    }
    let batch = UploadBatch { seq, byte_estimate: 0, observed, frames };
    Ok((batch, images))
}

/// Edge loop over any medium: deploy, capture, upload, repeat, then
/// confirm the final model with a heartbeat.
pub fn run_edge_session<M: Medium>(edge: &mut Edge, session: &mut Session<M>, iterations: u32) -> Result<()> {
    for iteration in 1..=u64::from(iterations) {
        let update = session.recv()?;
        ensure!(update.kind() == MessageKind::ModelUpdate, "expected a model update, got {:?}", update.kind());
        edge.deploy(update.payload())?;
        let round = edge.run_round(iteration)?;
        let mut summary = round.summary;
        let windows = session.send_budgeted(&mut edge.ledger, round.messages, round.end_time)?;
        summary.budget_windows = windows;
        session.send(MessageKind::Heartbeat, serde_json::to_vec(&summary)?)?;
    }
    let last = session.recv()?;
    ensure!(last.kind() == MessageKind::ModelUpdate, "expected the final model update");
    edge.deploy(last.payload())?;
    session.send(MessageKind::Heartbeat, Vec::new())?;
    session.drain()?;
    Ok(())
}

/// Cloud loop over any medium.
pub fn run_cloud_session<M: Medium>(cloud: &mut Cloud, session: &mut Session<M>, iterations: u32) -> Result<()> {
    session.send(MessageKind::ModelUpdate, cloud.model_blob())?;
    for iteration in 1..=u64::from(iterations) {
        let mut parts = Vec::new();
        let summary: EdgeSummary = loop {
            let m = session.recv()?;
            match m.kind() {
                MessageKind::FrameBatch => parts.push(decode_frame_batch(m.payload())?),
                MessageKind::Heartbeat => break serde_json::from_slice(m.payload()).context("edge summary")?,
                k => bail!("unexpected {k:?} during upload"),
            }
        };
        ensure!(summary.iteration == iteration, "edge reported iteration {} during {iteration}", summary.iteration);
        let expected = parts.first().map_or(0, |p| p.0.parts as usize);
        ensure!(parts.len() == expected, "received {} of {expected} upload parts", parts.len());
        let (batch, images) = assemble_upload(parts)?;
        cloud.on_upload(batch, images, &summary)?;
        session.send(MessageKind::ModelUpdate, cloud.model_blob())?;
    }
    let bye = session.recv()?;
    ensure!(bye.kind() == MessageKind::Heartbeat, "expected the edge's closing heartbeat");
    session.linger(Duration::from_secs(2))?;
    Ok(())
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn edge_logs(&self) -> PathBuf {
        self.out.join("edge")
    }
    pub fn state(&self) -> PathBuf {
        self.out.join("state")
    }
}

/// Full loop in one process: cloud on this thread, edge on another, joined
/// by a seeded lossy pipe.
pub fn simulate(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<RunOutput> {
    let start = Instant::now();
    let mut cloud = Cloud::new(cfg.clone())?;
    cloud.run_stage1()?;
    let (cloud_end, edge_end) = LossyPipe::pair(cfg.transport.loss_rate, derive_seed(cfg.seed, &[hash_str("link")]));
    let edge_cfg = cfg.clone();
    let log_dir = out.map(|o| o.join("edge"));
    let iterations = cfg.iterations;
    let window = cfg.transport.window;
    let edge_thread = std::thread::spawn(move || -> Result<SessionStats> {
        let mut edge = Edge::new(edge_cfg, log_dir)?;
        let mut session = Session::new(edge_end, window, Timing::in_process());
        run_edge_session(&mut edge, &mut session, iterations)?;
        Ok(session.stats())
    });
    let mut session = Session::new(cloud_end, window, Timing::in_process());
    let cloud_result = run_cloud_session(&mut cloud, &mut session, iterations);
    let cloud_stats = session.stats();
    drop(session);
    let edge_result = edge_thread.join().map_err(|_| anyhow!("edge thread panicked"))?;
    let edge_stats = match (edge_result, cloud_result) {
        (Err(e), _) => return Err(e.context("edge")),
        (Ok(_), Err(e)) => return Err(e.context("cloud")),
        (Ok(s), Ok(())) => s,
    };
    let mut timings = cloud.timings.clone();
    timings.cloud_session = cloud_stats;
    timings.edge_session = edge_stats;
    timings.total_s = start.elapsed().as_secs_f64();
    let report = cloud.report();
    if let Some(out) = out {
        write_run(out, cfg, &cloud, &report, &timings)?;
    }
    Ok(RunOutput { report, timings })
}

/// Cloud half of the two-process mode: listens, then drives the loop.
pub fn serve_cloud(cfg: &ScenarioConfig, port: u16, out: Option<&Path>) -> Result<RunOutput> {
    let start = Instant::now();
    let mut cloud = Cloud::new(cfg.clone())?;
    cloud.run_stage1()?;
    let listener = std::net::TcpListener::bind(("0.0.0.0", port)).with_context(|| format!("binding port {port}"))?;
    let (stream, _) = listener.accept().context("accepting edge connection")?;
    let mut session = Session::new(TcpMedium::new(stream)?, cfg.transport.window, Timing::network(cfg.transport.timeout_ms));
    run_cloud_session(&mut cloud, &mut session, cfg.iterations)?;
    let mut timings = cloud.timings.clone();
    timings.cloud_session = session.stats();
    timings.total_s = start.elapsed().as_secs_f64();
    let report = cloud.report();
    if let Some(out) = out {
        write_run(out, cfg, &cloud, &report, &timings)?;
    }
    Ok(RunOutput { report, timings })
}

/// Edge half of the two-process mode: connects (retrying while the cloud
/// trains stage 1) and runs the capture loop.
pub fn run_edge_client(cfg: &ScenarioConfig, host: &str, port: u16, out: Option<&Path>) -> Result<SessionStats> {
    let mut edge = Edge::new(cfg.clone(), out.map(|o| o.join("edge")))?;
    let mut attempt = 0;
    let stream = loop {
        match std::net::TcpStream::connect((host, port)) {
            Ok(s) => break s,
            Err(e) if attempt < cfg.transport.connect_retries => {
                attempt += 1;
                let _ = e;
                std::thread::sleep(Duration::from_millis(cfg.transport.timeout_ms.max(50) * 5));
            }
            Err(e) => return Err(e).with_context(|| format!("connecting to {host}:{port}")),
        }
    };
    let mut session = Session::new(TcpMedium::new(stream)?, cfg.transport.window, Timing::network(cfg.transport.timeout_ms));
    run_edge_session(&mut edge, &mut session, cfg.iterations)?;
    Ok(session.stats())
}

pub fn write_run(out: &Path, cfg: &ScenarioConfig, cloud: &Cloud, report: &RunReport, timings: &Timings) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    std::fs::write(out.join("timings.json"), serde_json::to_string_pretty(timings)? + "\n")?;
    cloud.save_state(&out.join("state"))?;
    report::write_all(out, report)?;
    Ok(())
}

/// Seconds since the start of the run's first day, for display.
pub fn day_of(t: f64) -> u64 {
    (t / SECONDS_PER_DAY).floor().max(0.0) as u64
}
