//! Field side of the loop: per-camera presence filtering, multi-camera
//! fusion, hysteresis event logic, continuous logging and upload selection.
//!
//! The node tracks frame ids, timestamps and detections only. Pixel data is
//! owned by whoever produced the frame.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorError, DetectorModel};
use crate::eval::RangeGroup;
use crate::geom::{BBox, ScoredBox};
use crate::math;
use crate::raster::{Modality, RasterImage};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EdgeError {
    #[error("modality mismatch: model does not support {0:?}")]
    ModalityMismatch(Modality),
    #[error("frame {frame} declares {declared:?} but carries a {actual:?} image")]
    InconsistentModality { frame: String, declared: Modality, actual: Modality },
    #[error("timestamp {now} not after {last} on camera {camera}")]
    NonMonotonicTimestamp { camera: String, last: f64, now: f64 },
    #[error("budget fraction must be in (0, 1], got {0}")]
    InvalidBudget(f64),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Simulation ground truth attached to a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: String,
    pub range_m: f64,
}

impl GroundTruthObject {
    pub fn range_group(&self) -> RangeGroup {
        RangeGroup::from_range(self.range_m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub id: String,
    pub camera: String,
    pub modality: Modality,
    pub timestamp: f64,
    pub image: RasterImage,
    pub ground_truth: Vec<GroundTruthObject>,
}

impl FrameRecord {
    /// Range group of the nearest ground-truth object, if any.
    pub fn range_group(&self) -> Option<RangeGroup> {
        self.ground_truth
            .iter()
            .min_by(|a, b| a.range_m.partial_cmp(&b.range_m).unwrap_or(Ordering::Equal))
            .map(GroundTruthObject::range_group)
    }

    pub fn frame_ref(&self) -> FrameRef {
        FrameRef { id: self.id.clone(), camera: self.camera.clone(), timestamp: self.timestamp }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub id: String,
    pub camera: String,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// Stationary prior.
    pub p0: f64,
    pub lr_det: f64,
    pub lr_nodet: f64,
    /// Detection score that counts as evidence.
    pub s_evt: f64,
    /// Rate (1/s) at which the belief relaxes toward `p0`.
    pub transition_rate: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self { p0: 0.001, lr_det: 20.0, lr_nodet: 0.5, s_evt: 0.5, transition_rate: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceBelief {
    pub camera: String,
    pub posterior: f64,
    pub updated_at: f64,
}

impl PresenceBelief {
    pub fn new(camera: impl Into<String>, p0: f64, at: f64) -> Self {
        Self { camera: camera.into(), posterior: p0, updated_at: at }
    }
}

/// Relaxes `p` toward `p0` over `dt`, then applies likelihood ratio `lr` in
/// odds form.
pub fn bayes_step(p: f64, lr: f64, dt: f64, params: &FilterParams) -> f64 {
    let decay = math::exp(-params.transition_rate * dt.max(0.0));
    let prior = params.p0 + (p - params.p0) * decay;
    let num = prior * lr;
    let den = num + (1.0 - prior);
    if den <= 0.0 || !den.is_finite() {
        return if lr > 1.0 { 1.0 } else { prior.clamp(0.0, 1.0) };
    }
    (num / den).clamp(0.0, 1.0)
}

pub fn bayes_update(belief: &PresenceBelief, detections: &[ScoredBox], dt: f64, params: &FilterParams) -> PresenceBelief {
    let hit = detections.iter().any(|d| d.score >= params.s_evt);
    let lr = if hit { params.lr_det } else { params.lr_nodet };
    PresenceBelief {
        camera: belief.camera.clone(),
        posterior: bayes_step(belief.posterior, lr, dt, params),
        updated_at: belief.updated_at + dt.max(0.0),
    }
}

/// Noisy-OR: `1 - prod(1 - p_i)`.
pub fn fuse_cameras<'a>(beliefs: impl IntoIterator<Item = &'a PresenceBelief>) -> f64 {
    let mut it = beliefs.into_iter().map(|b| b.posterior.clamp(0.0, 1.0));
    let first = it.next().unwrap_or(0.0);
    it.fold(first, |acc, p| 1.0 - (1.0 - acc) * (1.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventParams {
    pub t_on: f64,
    pub t_off: f64,
    /// Seconds the fused probability must stay at or under `t_off`.
    pub hold: f64,
    pub pre: f64,
    pub post: f64,
}

impl Default for EventParams {
    fn default() -> Self {
        Self { t_on: 0.8, t_off: 0.3, hold: 3.0, pre: 12.0, post: 12.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EventState {
    Idle,
    Active {
        id: u64,
        trigger: f64,
        peak: f64,
        /// Start of the current run at or under `t_off`.
        quiet_since: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventTransition {
    Opened { id: u64, trigger: f64 },
    Closed { id: u64, trigger: f64, end: f64, peak: f64 },
}

/// One step of the hysteresis machine. A closed event ends where its final
/// quiet run began. `next_id` is the id given to an event opened here.
pub fn event_state_step(
    state: EventState,
    fused: f64,
    now: f64,
    next_id: u64,
    params: &EventParams,
) -> (EventState, Option<EventTransition>) {
    match state {
        EventState::Idle if fused >= params.t_on => (
            EventState::Active { id: next_id, trigger: now, peak: fused, quiet_since: None },
            Some(EventTransition::Opened { id: next_id, trigger: now }),
        ),
        EventState::Idle => (EventState::Idle, None),
        EventState::Active { id, trigger, peak, quiet_since } => {
            let peak = peak.max(fused);
            if fused > params.t_off {
                return (EventState::Active { id, trigger, peak, quiet_since: None }, None);
            }
            let since = quiet_since.unwrap_or(now);
            if now - since >= params.hold {
                (EventState::Idle, Some(EventTransition::Closed { id, trigger, end: since, peak }))
            } else {
                (EventState::Active { id, trigger, peak, quiet_since: Some(since) }, None)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventClass {
    Tp,
    Fp,
    Fn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub id: u64,
    pub trigger: f64,
    pub end: f64,
    pub cameras: Vec<String>,
    pub frames: Vec<String>,
    pub peak: f64,
    pub classification: Option<EventClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadCandidate {
    pub frame: FrameRef,
    pub detections: Vec<ScoredBox>,
}

impl UploadCandidate {
    fn best_score(&self) -> Option<f64> {
        self.detections.iter().map(|d| d.score).fold(None, |m, s| Some(m.map_or(s, |m: f64| m.max(s))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UploadPolicy {
    pub budget_fraction: f64,
    /// Fill leftover budget with a uniform draw of frames without detections.
    pub random_residue: bool,
    pub bytes_per_frame: u64,
    pub seed: u64,
}

impl Default for UploadPolicy {
    fn default() -> Self {
        Self { budget_fraction: 0.015, random_residue: true, bytes_per_frame: 20_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadBatch {
    pub seq: u64,
    pub frames: Vec<UploadCandidate>,
    pub observed: usize,
    pub byte_estimate: u64,
}

/// Detection frames first by best score (ties by window order), then a
/// seeded uniform draw from frames without detections, at most
/// `ceil(budget_fraction * window.len())` and at most `cap` frames.
pub fn select_upload(
    window: &[UploadCandidate],
    policy: &UploadPolicy,
    seq: u64,
    cap: Option<usize>,
) -> Result<UploadBatch, EdgeError> {
    let f = policy.budget_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(EdgeError::InvalidBudget(f));
    }
    let mut budget = math::budget_count(f, window.len());
    if let Some(c) = cap {
        budget = budget.min(c);
    }
    let mut hits: Vec<(f64, usize)> =
        window.iter().enumerate().filter_map(|(i, c)| c.best_score().map(|s| (s, i))).collect();
    hits.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = hits.iter().take(budget).map(|h| h.1).collect();
    if policy.random_residue && chosen.len() < budget {
        let mut empty: Vec<usize> = (0..window.len()).filter(|i| window[*i].detections.is_empty()).collect();
        let k = (budget - chosen.len()).min(empty.len());
        let mut rng = math::rng_for(policy.seed, &[seq]);
        for j in 0..k {
            let pick = rng.random_range(j..empty.len());
            empty.swap(j, pick);
        }
        let mut residue = empty[..k].to_vec();
        residue.sort_unstable();
        chosen.extend(residue);
    }
    let frames: Vec<UploadCandidate> = chosen.into_iter().map(|i| window[i].clone()).collect();
    Ok(UploadBatch {
        seq,
        byte_estimate: policy.bytes_per_frame * frames.len() as u64,
        observed: window.len(),
        frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    pub filter: FilterParams,
    pub events: EventParams,
    /// Every `log_stride`-th frame of a camera enters the continuous log.
    pub log_stride: u64,
    pub upload: UploadPolicy,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self { filter: FilterParams::default(), events: EventParams::default(), log_stride: 10, upload: UploadPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub frame: FrameRef,
    pub detections: Vec<ScoredBox>,
}

#[derive(Debug, Clone, PartialEq)]
struct CameraState {
    belief: PresenceBelief,
    frames_seen: u64,
}

/// What one ingested frame did to the node.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub detections: Vec<ScoredBox>,
    pub logged: bool,
    /// Detection at or above the evidence score: frame pinned in the ring buffer.
    pub retained: bool,
    pub fused: f64,
    pub transition: Option<EventTransition>,
}

#[derive(Debug, Clone)]
struct PendingEvent {
    id: u64,
    trigger: f64,
    end: Option<f64>,
    peak: f64,
    cameras: BTreeSet<String>,
}

/// Single-writer edge state.
#[derive(Debug, Clone)]
pub struct EdgeNode {
    config: EdgeConfig,
    cameras: BTreeMap<String, CameraState>,
    state: EventState,
    next_event: u64,
    pending: Vec<PendingEvent>,
    ring: VecDeque<(FrameRef, bool)>,
    log: Vec<LogEntry>,
    events: Vec<DetectionEvent>,
    window: Vec<UploadCandidate>,
    observed_total: usize,
    uploaded_total: usize,
    next_batch: u64,
}

impl EdgeNode {
    pub fn new(config: EdgeConfig) -> Self {
        Self {
            config,
            cameras: BTreeMap::new(),
            state: EventState::Idle,
            next_event: 0,
            pending: Vec::new(),
            ring: VecDeque::new(),
            log: Vec::new(),
            events: Vec::new(),
            window: Vec::new(),
            observed_total: 0,
            uploaded_total: 0,
            next_batch: 0,
        }
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.config
    }

    pub fn continuous_log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn events(&self) -> &[DetectionEvent] {
        &self.events
    }

    pub fn event_state(&self) -> EventState {
        self.state
    }

    pub fn ring_ids(&self) -> impl Iterator<Item = &str> {
        self.ring.iter().map(|(f, _)| f.id.as_str())
    }

    pub fn pinned_ids(&self) -> impl Iterator<Item = &str> {
        self.ring.iter().filter(|(_, p)| *p).map(|(f, _)| f.id.as_str())
    }

    pub fn beliefs(&self) -> impl Iterator<Item = &PresenceBelief> {
        self.cameras.values().map(|c| &c.belief)
    }

    pub fn observed_total(&self) -> usize {
        self.observed_total
    }

    pub fn uploaded_total(&self) -> usize {
        self.uploaded_total
    }

    /// Runs the model, logs, updates the camera belief, fuses and steps the
    /// event machine.
    pub fn ingest_frame<M: DetectorModel + ?Sized>(
        &mut self,
        frame: &FrameRecord,
        model: &M,
    ) -> Result<IngestOutcome, EdgeError> {
        let actual = frame.image.modality();
        if actual != frame.modality {
            return Err(EdgeError::InconsistentModality { frame: frame.id.clone(), declared: frame.modality, actual });
        }
        if !model.supports(actual) {
            return Err(EdgeError::ModalityMismatch(actual));
        }
        if let Some(cam) = self.cameras.get(&frame.camera) {
            if frame.timestamp <= cam.belief.updated_at && cam.frames_seen > 0 {
                return Err(EdgeError::NonMonotonicTimestamp {
                    camera: frame.camera.clone(),
                    last: cam.belief.updated_at,
                    now: frame.timestamp,
                });
            }
        }
        let detections = model.infer(&frame.image)?;
        Ok(self.record(frame.frame_ref(), detections))
    }

    /// Ingest with detections computed elsewhere.
    pub fn record(&mut self, frame: FrameRef, detections: Vec<ScoredBox>) -> IngestOutcome {
        let fp = self.config.filter;
        let now = frame.timestamp;
        let cam = self.cameras.entry(frame.camera.clone()).or_insert_with(|| CameraState {
            belief: PresenceBelief::new(frame.camera.clone(), fp.p0, now),
            frames_seen: 0,
        });
        let logged = cam.frames_seen % self.config.log_stride.max(1) == 0;
        cam.frames_seen += 1;
        let dt = now - cam.belief.updated_at;
        cam.belief = bayes_update(&cam.belief, &detections, dt, &fp);
        cam.belief.updated_at = now;
        let retained = detections.iter().any(|d| d.score >= fp.s_evt);

        if logged {
            self.log.push(LogEntry { frame: frame.clone(), detections: detections.clone() });
        }
        self.observed_total += 1;
        self.window.push(UploadCandidate { frame: frame.clone(), detections: detections.clone() });
        self.ring.push_back((frame.clone(), retained));

        let fused = fuse_cameras(self.cameras.values().map(|c| &c.belief));
        let (state, transition) = event_state_step(self.state, fused, now, self.next_event, &self.config.events);
        self.state = state;
        match transition {
            Some(EventTransition::Opened { id, trigger }) => {
                self.next_event += 1;
                self.pending.push(PendingEvent { id, trigger, end: None, peak: fused, cameras: BTreeSet::new() });
            }
            Some(EventTransition::Closed { id, end, peak, .. }) => {
                if let Some(p) = self.pending.iter_mut().find(|p| p.id == id) {
                    p.end = Some(end);
                    p.peak = peak;
                }
            }
            None => {}
        }
        for p in self.pending.iter_mut().filter(|p| p.end.is_none()) {
            p.peak = p.peak.max(fused);
            if retained {
                p.cameras.insert(frame.camera.clone());
            }
        }
        self.finalize(now, false);
        self.evict(now);
        IngestOutcome { detections, logged, retained, fused, transition }
    }

    /// Closes out events whose post-roll has elapsed. With `flush`, every
    /// pending event is closed at `now`.
    pub fn finalize(&mut self, now: f64, flush: bool) {
        let ev = self.config.events;
        let mut i = 0;
        while i < self.pending.len() {
            let p = &self.pending[i];
            let end = match (p.end, flush) {
                (Some(e), _) if flush || now >= e + ev.post => e,
                (None, true) => now,
                _ => {
                    i += 1;
                    continue;
                }
            };
            let p = self.pending.remove(i);
            let (lo, hi) = (p.trigger - ev.pre, end + ev.post);
            let frames =
                self.ring.iter().filter(|(f, _)| f.timestamp >= lo && f.timestamp <= hi).map(|(f, _)| f.id.clone()).collect();
            self.events.push(DetectionEvent {
                id: p.id,
                trigger: p.trigger,
                end,
                cameras: p.cameras.into_iter().collect(),
                frames,
                peak: p.peak,
                classification: None,
            });
            if flush {
                self.state = EventState::Idle;
            }
        }
    }

    fn evict(&mut self, now: f64) {
        let ev = self.config.events;
        let floor = self.pending.iter().map(|p| p.trigger - ev.pre).fold(now - ev.pre, f64::min);
        while self.ring.front().is_some_and(|(f, _)| f.timestamp < floor) {
            self.ring.pop_front();
        }
    }

    /// Selects this window's upload and starts a new window. The count also
    /// respects the running total: uploads never exceed the budget fraction
    /// of every frame observed so far.
    pub fn take_upload(&mut self) -> Result<UploadBatch, EdgeError> {
        let policy = self.config.upload;
        let total_cap = math::budget_count(policy.budget_fraction, self.observed_total).saturating_sub(self.uploaded_total);
        let window = core::mem::take(&mut self.window);
        let batch = select_upload(&window, &policy, self.next_batch, Some(total_cap))?;
        self.next_batch += 1;
        self.uploaded_total += batch.frames.len();
        Ok(batch)
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn sb(score: f64) -> ScoredBox {
        ScoredBox::new(BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), "cassowary", score).unwrap()
    }

    #[test]
    fn odds_form_update() {
        let p = FilterParams { p0: 0.5, ..FilterParams::default() };
        assert!((bayes_step(0.5, 3.0, 0.0, &p) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn uninformative_update_is_identity() {
        let p = FilterParams::default();
        for q in [0.0, 0.1, 0.42, 1.0] {
            assert!((bayes_step(q, 1.0, 0.0, &p) - q).abs() < 1e-12);
        }
    }

    #[test]
    fn update_uses_detection_evidence() {
        let p = FilterParams::default();
        let b = PresenceBelief::new("c0", 0.5, 0.0);
        let hit = bayes_update(&b, &[sb(0.9)], 0.0, &p);
        let miss = bayes_update(&b, &[sb(0.1)], 0.0, &p);
        assert!((hit.posterior - 20.0 / 21.0).abs() < 1e-12);
        assert!((miss.posterior - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_or_examples() {
        let b = |p| PresenceBelief::new("c", p, 0.0);
        assert_eq!(fuse_cameras(&[b(0.3)]), 0.3);
        assert!((fuse_cameras(&[b(0.5), b(0.5)]) - 0.75).abs() < 1e-12);
        assert_eq!(fuse_cameras(&[b(0.2), b(1.0)]), 1.0);
    }

    #[test]
    fn opens_at_crossing_and_holds_through_oscillation() {
        let ev = EventParams::default();
        let (s, t) = event_state_step(EventState::Idle, 0.2, 0.0, 0, &ev);
        assert_eq!((s, t), (EventState::Idle, None));
        let (s, t) = event_state_step(s, 0.9, 1.0, 0, &ev);
        assert_eq!(t, Some(EventTransition::Opened { id: 0, trigger: 1.0 }));
        let mut s = s;
        for (i, f) in [0.5, 0.75, 0.35, 0.79, 0.31].iter().enumerate() {
            let (n, t) = event_state_step(s, *f, 2.0 + i as f64, 1, &ev);
            assert!(t.is_none());
            assert!(matches!(n, EventState::Active { .. }));
            s = n;
        }
    }

    struct Scripted;
    impl DetectorModel for Scripted {
        fn version(&self) -> u64 {
            1
        }
        fn supports(&self, m: Modality) -> bool {
            m == Modality::Rgb
        }
        fn infer(&self, _: &RasterImage) -> Result<Vec<ScoredBox>, DetectorError> {
            Ok(Vec::new())
        }
    }

    fn frame(cam: &str, t: f64, channels: u8) -> FrameRecord {
        let dims = crate::ImageDims::new(4, 4).unwrap();
        let image = RasterImage::filled(dims, channels, &vec![0u8; channels as usize]).unwrap();
        FrameRecord {
            id: format!("{cam}-{t}"),
            camera: cam.into(),
            modality: Modality::from_channels(channels).unwrap(),
            timestamp: t,
            image,
            ground_truth: Vec::new(),
        }
    }

    #[test]
    fn modality_mismatch_and_monotonic_time() {
        let mut node = EdgeNode::new(EdgeConfig::default());
        let err = node.ingest_frame(&frame("c", 0.0, 1), &Scripted).unwrap_err();
        assert!(format!("{err}").contains("modality mismatch"));
        let out = node.ingest_frame(&frame("c", 0.0, 3), &Scripted).unwrap();
        assert!(out.detections.is_empty());
        assert!(matches!(
            node.ingest_frame(&frame("c", 0.0, 3), &Scripted),
            Err(EdgeError::NonMonotonicTimestamp { .. })
        ));
    }

    #[test]
    fn stride_semantics() {
        let mut node = EdgeNode::new(EdgeConfig { log_stride: 10, ..EdgeConfig::default() });
        let logged: Vec<bool> =
            (0..25).map(|i| node.ingest_frame(&frame("c", f64::from(i), 3), &Scripted).unwrap().logged).collect();
        assert!(logged[0] && logged[10] && logged[20]);
        assert!(!logged[1] && !logged[19]);
        assert_eq!(node.continuous_log().len(), 3);
    }

    fn fref(i: u32) -> FrameRef {
        FrameRef { id: format!("f{i}"), camera: "c".into(), timestamp: f64::from(i) }
    }

    #[test]
    fn burst_buffers_expected_span() {
        let cfg = EdgeConfig {
            // A fast transition rate makes every frame's posterior depend on that frame alone.
            filter: FilterParams { p0: 0.001, lr_det: 1e4, lr_nodet: 0.5, s_evt: 0.5, transition_rate: 50.0 },
            events: EventParams { pre: 10.0, post: 10.0, ..EventParams::default() },
            ..EdgeConfig::default()
        };
        let mut node = EdgeNode::new(cfg);
        for i in 0..60 {
            let dets = if (20..25).contains(&i) { vec![sb(0.9)] } else { Vec::new() };
            let out = node.record(fref(i), dets);
            assert_eq!(out.retained, (20..25).contains(&i));
        }
        node.finalize(60.0, true);
        let events = node.events();
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!((e.trigger, e.end), (20.0, 25.0));
        let ts: Vec<u32> = e.frames.iter().map(|f| f[1..].parse().unwrap()).collect();
        assert_eq!(ts.first().copied(), Some(10));
        assert_eq!(ts.last().copied(), Some(35));
        assert_eq!(ts.last().unwrap() - ts.first().unwrap(), 25);
    }

    fn window(n: usize, det: impl Fn(usize) -> Option<f64>) -> Vec<UploadCandidate> {
        (0..n)
            .map(|i| UploadCandidate {
                frame: fref(i as u32),
                detections: det(i).map(|s| vec![sb(s)]).unwrap_or_default(),
            })
            .collect()
    }

    #[test]
    fn upload_budget_on_thousand_frames() {
        let w = window(1000, |i| (i % 7 == 0).then_some(0.5 + (i % 13) as f64 / 100.0));
        let b = select_upload(&w, &UploadPolicy::default(), 0, None).unwrap();
        assert!(b.frames.len() <= 15);
    }

    #[test]
    fn all_detections_takes_top_scores() {
        let w = window(1000, |i| Some(i as f64 / 1000.0));
        let b = select_upload(&w, &UploadPolicy::default(), 0, None).unwrap();
        let ids: Vec<&str> = b.frames.iter().map(|f| f.frame.id.as_str()).collect();
        let want: Vec<String> = (985..1000).rev().map(|i| format!("f{i}")).collect();
        assert_eq!(ids, want.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn residue_is_uniform_and_reproducible() {
        let w = window(1000, |_| None);
        let p = UploadPolicy { seed: 9, ..UploadPolicy::default() };
        let a = select_upload(&w, &p, 3, None).unwrap();
        let b = select_upload(&w, &p, 3, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), 15);
        let c = select_upload(&w, &UploadPolicy { seed: 10, ..p }, 3, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_budget() {
        let p = UploadPolicy { budget_fraction: 0.0, ..UploadPolicy::default() };
        assert!(select_upload(&[], &p, 0, None).is_err());
    }

    #[test]
    fn cumulative_upload_cap() {
        let mut node = EdgeNode::new(EdgeConfig::default());
        let mut uploaded = 0;
        for round in 0..7u32 {
            for i in 0..150 {
                let t = f64::from(round * 150 + i);
                node.record(FrameRef { id: format!("{t}"), camera: "c".into(), timestamp: t }, Vec::new());
            }
            uploaded += node.take_upload().unwrap().frames.len();
            assert!(uploaded <= math::budget_count(0.015, node.observed_total()));
        }
    }
}
