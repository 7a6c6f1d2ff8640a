//! Detection and event metrics: per-frame TPR, mTPR per range group,
//! frame-level FPR, all-point AP / mAP@0.5, ROC points, operating-point
//! selection and event-level precision/recall.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geom::{iou, BBox, ScoredBox};
use crate::raster::Modality;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("frame has no ground truth; TPR is only defined on positive frames")]
    NoGroundTruth,
    #[error("no sighting cases in the requested range group")]
    EmptyGroup,
    #[error("no negative frames")]
    NoNegatives,
    #[error("missing per-frame result for frame {0}")]
    MissingFrame(String),
    #[error("empty threshold grid")]
    EmptyGrid,
    #[error("cutoff infeasible: no ROC point has FPR <= {0}")]
    CutoffInfeasible(f64),
    #[error("degenerate counts: precision or recall denominator is zero")]
    DegenerateCounts,
    #[error("invalid interval: end before start")]
    InvalidInterval,
}

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RangeGroup {
    /// 0-100 m
    #[serde(rename = "0-100m")]
    Near,
    /// 100-200 m
    #[serde(rename = "100-200m")]
    Far,
}

impl RangeGroup {
    pub fn from_range(metres: f64) -> Self {
        if metres < 100.0 {
            RangeGroup::Near
        } else {
            RangeGroup::Far
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RangeGroup::Near => "0-100m",
            RangeGroup::Far => "100-200m",
        }
    }

    pub const ALL: [RangeGroup; 2] = [RangeGroup::Near, RangeGroup::Far];
}

/// Detections sorted by descending score; equal scores keep input order.
fn by_score_desc<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| score(&items[b]).partial_cmp(&score(&items[a])).unwrap_or(Ordering::Equal));
    order
}

/// Number of ground-truth boxes matched by greedy score-ordered matching.
/// Each detection claims the unmatched GT box it overlaps most, if that
/// overlap reaches `iou_threshold`.
pub fn matched_count(detections: &[ScoredBox], gt: &[BBox], iou_threshold: f64) -> usize {
    let mut taken = alloc::vec![false; gt.len()];
    let mut matched = 0;
    for i in by_score_desc(detections, |d| d.score) {
        let d = &detections[i].bbox;
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, g)| (j, iou(d, g)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)));
        if let Some((j, o)) = best {
            if o >= iou_threshold {
                taken[j] = true;
                matched += 1;
            }
        }
    }
    matched
}

pub fn frame_tpr(detections: &[ScoredBox], gt: &[BBox], iou_threshold: f64) -> Result<f64, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(matched_count(detections, gt, iou_threshold) as f64 / gt.len() as f64)
}

/// One contiguous appearance of the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SightingCase {
    pub id: String,
    pub frame_ids: Vec<String>,
    pub range_group: RangeGroup,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationDataset {
    pub positive_cases: Vec<SightingCase>,
    pub negative_frames: Vec<String>,
    pub ground_truth: BTreeMap<String, Vec<BBox>>,
}

impl EvaluationDataset {
    pub fn validate(&self) -> Result<(), EvalError> {
        let positives: alloc::collections::BTreeSet<&str> =
            self.positive_cases.iter().flat_map(|c| c.frame_ids.iter().map(String::as_str)).collect();
        if let Some(n) = self.negative_frames.iter().find(|n| positives.contains(n.as_str())) {
            return Err(EvalError::MissingFrame(n.clone()));
        }
        Ok(())
    }
}

/// Unweighted mean over cases (optionally one range group) of each case's
/// mean per-frame TPR.
pub fn mtpr(
    cases: &[SightingCase],
    frame_tprs: &BTreeMap<String, f64>,
    group: Option<RangeGroup>,
) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for case in cases.iter().filter(|c| group.is_none_or(|g| c.range_group == g)) {
        if case.frame_ids.is_empty() {
            continue;
        }
        let mut case_sum = 0.0;
        for f in &case.frame_ids {
            case_sum += frame_tprs.get(f).ok_or_else(|| EvalError::MissingFrame(f.clone()))?;
        }
        sum += case_sum / case.frame_ids.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyGroup);
    }
    Ok(sum / n as f64)
}

/// Fraction of negative frames with at least one `target` detection.
pub fn fpr(
    negative_frames: &[String],
    detections: &BTreeMap<String, Vec<ScoredBox>>,
    target: &str,
) -> Result<f64, EvalError> {
    if negative_frames.is_empty() {
        return Err(EvalError::NoNegatives);
    }
    let fired = negative_frames
        .iter()
        .filter(|f| detections.get(*f).is_some_and(|d| d.iter().any(|b| b.label == target)))
        .count();
    Ok(fired as f64 / negative_frames.len() as f64)
}

/// A detection or ground-truth box tagged with the image it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBox<T> {
    pub image: String,
    pub item: T,
}

/// TP/FP flag per detection in descending-score order. Each detection
/// claims the unmatched GT box in its image that it overlaps most.
pub fn match_detections(detections: &[ImageBox<ScoredBox>], gt: &[ImageBox<BBox>], iou_threshold: f64) -> Vec<bool> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gt.iter().enumerate() {
        by_image.entry(g.image.as_str()).or_default().push(i);
    }
    let mut taken = alloc::vec![false; gt.len()];
    let mut flags = Vec::with_capacity(detections.len());
    for i in by_score_desc(detections, |d| d.item.score) {
        let d = &detections[i];
        let best = by_image.get(d.image.as_str()).and_then(|cands| {
            cands
                .iter()
                .filter(|&&j| !taken[j])
                .map(|&j| (j, iou(&d.item.bbox, &gt[j].item)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)))
        });
        let tp = match best {
            Some((j, o)) if o >= iou_threshold => {
                taken[j] = true;
                true
            }
            _ => false,
        };
        flags.push(tp);
    }
    flags
}

/// All-point interpolated AP for a single class. Zero when there are no
/// ground-truth objects.
pub fn average_precision(detections: &[ImageBox<ScoredBox>], gt: &[ImageBox<BBox>], iou_threshold: f64) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let flags = match_detections(detections, gt, iou_threshold);
    let n_gt = gt.len() as f64;
    let mut recall = alloc::vec![0.0];
    let mut precision = alloc::vec![1.0];
    let (mut tp, mut fp) = (0.0, 0.0);
    for f in flags {
        if f {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt);
        precision.push(tp / (tp + fp));
    }
    // Precision envelope, right to left.
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] > recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    ap
}

/// Mean AP over classes that have ground truth, at IoU 0.5.
pub fn map_at_50(detections: &[ImageBox<ScoredBox>], gt: &[ImageBox<(BBox, String)>]) -> f64 {
    let mut classes: BTreeMap<&str, Vec<ImageBox<BBox>>> = BTreeMap::new();
    for g in gt {
        classes
            .entry(g.item.1.as_str())
            .or_default()
            .push(ImageBox { image: g.image.clone(), item: g.item.0 });
    }
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|(class, boxes)| {
            let dets: Vec<ImageBox<ScoredBox>> =
                detections.iter().filter(|d| d.item.label == *class).cloned().collect();
            average_precision(&dets, boxes, MATCH_IOU)
        })
        .sum();
    total / classes.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Detector output for one frame alongside its ground truth (empty for
/// negative frames).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: String,
    pub detections: Vec<ScoredBox>,
    pub gt: Vec<BBox>,
}

/// One point per threshold: TPR is the mean frame TPR over positive frames
/// keeping detections scoring at least the threshold; FPR is the fraction
/// of negative frames with any such detection.
pub fn roc_points(
    positives: &[FrameResult],
    negatives: &[FrameResult],
    thresholds: &[f64],
) -> Result<Vec<RocPoint>, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut tpr_sum = 0.0;
        let mut n_pos = 0usize;
        for f in positives.iter().filter(|f| !f.gt.is_empty()) {
            let kept: Vec<ScoredBox> = f.detections.iter().filter(|d| d.score >= t).cloned().collect();
            tpr_sum += frame_tpr(&kept, &f.gt, MATCH_IOU)?;
            n_pos += 1;
        }
        let fired = negatives.iter().filter(|f| f.detections.iter().any(|d| d.score >= t)).count();
        out.push(RocPoint {
            threshold: t,
            tpr: if n_pos == 0 { 0.0 } else { tpr_sum / n_pos as f64 },
            fpr: if negatives.is_empty() { 0.0 } else { fired as f64 / negatives.len() as f64 },
        });
    }
    Ok(out)
}

/// Highest-TPR point with FPR at most `fpr_cutoff`; ties go to lower FPR,
/// then to the higher threshold.
pub fn select_operating_point(points: &[RocPoint], fpr_cutoff: f64) -> Result<RocPoint, EvalError> {
    points
        .iter()
        .filter(|p| p.fpr <= fpr_cutoff)
        .copied()
        .max_by(|a, b| {
            a.tpr
                .partial_cmp(&b.tpr)
                .unwrap_or(Ordering::Equal)
                .then(b.fpr.partial_cmp(&a.fpr).unwrap_or(Ordering::Equal))
                .then(a.threshold.partial_cmp(&b.threshold).unwrap_or(Ordering::Equal))
        })
        .ok_or(EvalError::CutoffInfeasible(fpr_cutoff))
}

pub fn event_precision_recall(tp: u64, fn_: u64, fp: u64) -> Result<(f64, f64), EvalError> {
    if tp + fn_ == 0 || tp + fp == 0 {
        return Err(EvalError::DegenerateCounts);
    }
    Ok((tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64))
}

/// Closed time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn new(start: f64, end: f64) -> Result<Self, EvalError> {
        if end < start {
            return Err(EvalError::InvalidInterval);
        }
        Ok(Self { start, end })
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Merges overlapping (or touching) spans.
pub fn merge_spans(spans: &[Span]) -> Vec<Span> {
    let mut sorted = spans.to_vec();
    sorted.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap_or(Ordering::Equal));
    let mut out: Vec<Span> = Vec::new();
    for s in sorted {
        match out.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventClassification {
    pub totals: EventCounts,
    /// Day index (floor of seconds / 86400) to counts.
    pub per_day: BTreeMap<u64, EventCounts>,
    /// Per input event: true if it overlapped a sighting.
    pub event_is_tp: Vec<bool>,
}

pub const SECONDS_PER_DAY: f64 = 86_400.0;

fn day_of(t: f64) -> u64 {
    crate::math::floor(t.max(0.0) / SECONDS_PER_DAY) as u64
}

/// Events overlapping a merged sighting are true detections; a sighting
/// covered by at least one event counts once as TP, otherwise as FN; events
/// overlapping no sighting are FP. TP and FN are dated by sighting start,
/// FP by event start.
pub fn classify_events(events: &[Span], sightings: &[Span]) -> EventClassification {
    let merged = merge_spans(sightings);
    let mut out = EventClassification::default();
    for e in events {
        let hit = merged.iter().any(|s| s.overlaps(e));
        out.event_is_tp.push(hit);
        if !hit {
            out.totals.fp += 1;
            out.per_day.entry(day_of(e.start)).or_default().fp += 1;
        }
    }
    for s in &merged {
        let day = out.per_day.entry(day_of(s.start)).or_default();
        if events.iter().any(|e| e.overlaps(s)) {
            day.tp += 1;
            out.totals.tp += 1;
        } else {
            day.fn_ += 1;
            out.totals.fn_ += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }
    fn det(bb: BBox, s: f64) -> ScoredBox {
        ScoredBox::new(bb, "t", s).unwrap()
    }

    #[test]
    fn frame_tpr_examples() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        // IoU 0.8: [0,0,10,8]
        assert_eq!(frame_tpr(&[det(b(0.0, 0.0, 10.0, 8.0), 0.9)], &[g], 0.5).unwrap(), 1.0);
        let g2 = b(50.0, 50.0, 60.0, 60.0);
        assert_eq!(frame_tpr(&[det(g, 0.9)], &[g, g2], 0.5).unwrap(), 0.5);
        // IoU 0.4: [0,0,10,4]
        assert_eq!(frame_tpr(&[det(b(0.0, 0.0, 10.0, 4.0), 0.9)], &[g], 0.5).unwrap(), 0.0);
        assert_eq!(frame_tpr(&[], &[], 0.5), Err(EvalError::NoGroundTruth));
    }

    #[test]
    fn one_detection_matches_one_gt() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let dets = [det(g, 0.9), det(g, 0.8)];
        assert_eq!(frame_tpr(&dets, &[g], 0.5).unwrap(), 1.0);
        assert_eq!(matched_count(&dets, &[g, b(0.0, 0.0, 10.0, 9.0)], 0.5), 2);
    }

    fn case(id: &str, frames: &[&str], g: RangeGroup) -> SightingCase {
        SightingCase {
            id: id.into(),
            frame_ids: frames.iter().map(|s| s.to_string()).collect(),
            range_group: g,
            modality: Modality::Rgb,
        }
    }

    #[test]
    fn mtpr_examples() {
        let cases = vec![case("a", &["a1", "a2", "a3"], RangeGroup::Near), case("b", &["b1"], RangeGroup::Near)];
        let mut tprs = BTreeMap::new();
        tprs.insert("a1".to_string(), 1.0);
        tprs.insert("a2".to_string(), 1.0);
        tprs.insert("a3".to_string(), 0.0);
        tprs.insert("b1".to_string(), 1.0);
        let m = mtpr(&cases, &tprs, Some(RangeGroup::Near)).unwrap();
        assert!((m - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((m - 0.8333).abs() < 1e-4);
        assert_eq!(mtpr(&cases[1..], &tprs, None).unwrap(), 1.0);
        assert_eq!(mtpr(&cases, &tprs, Some(RangeGroup::Far)), Err(EvalError::EmptyGroup));
    }

    #[test]
    fn mtpr_ignores_frame_count_imbalance() {
        let many: Vec<String> = (0..100).map(|i| alloc::format!("m{i}")).collect();
        let refs: Vec<&str> = many.iter().map(String::as_str).collect();
        let cases = vec![case("many", &refs, RangeGroup::Far), case("one", &["o"], RangeGroup::Far)];
        let mut tprs: BTreeMap<String, f64> = many.iter().map(|f| (f.clone(), 0.0)).collect();
        tprs.insert("o".into(), 1.0);
        assert_eq!(mtpr(&cases, &tprs, None).unwrap(), 0.5);
    }

    #[test]
    fn fpr_examples() {
        let negs: Vec<String> = (0..1000).map(|i| alloc::format!("n{i}")).collect();
        let mut dets = BTreeMap::new();
        assert_eq!(fpr(&negs, &dets, "t").unwrap(), 0.0);
        for i in 0..3 {
            dets.insert(negs[i].clone(), vec![det(b(0.0, 0.0, 1.0, 1.0), 0.9)]);
        }
        // A non-target detection does not count.
        dets.insert(negs[10].clone(), vec![ScoredBox::new(b(0.0, 0.0, 1.0, 1.0), "car", 0.9).unwrap()]);
        assert_eq!(fpr(&negs, &dets, "t").unwrap(), 0.003);
        for n in &negs {
            dets.insert(n.clone(), vec![det(b(0.0, 0.0, 1.0, 1.0), 0.9)]);
        }
        assert_eq!(fpr(&negs, &dets, "t").unwrap(), 1.0);
        assert_eq!(fpr(&[], &dets, "t"), Err(EvalError::NoNegatives));
    }

    fn ib<T>(image: &str, item: T) -> ImageBox<T> {
        ImageBox { image: image.into(), item }
    }

    #[test]
    fn ap_examples() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let miss = b(50.0, 50.0, 60.0, 60.0);
        let gt = [ib("i", g)];
        assert_eq!(average_precision(&[ib("i", det(g, 0.9)), ib("i", det(miss, 0.8))], &gt, 0.5), 1.0);
        assert_eq!(average_precision(&[ib("i", det(miss, 0.9)), ib("i", det(g, 0.8))], &gt, 0.5), 0.5);
        let g2 = b(20.0, 0.0, 30.0, 10.0);
        let gt2 = [ib("i", g), ib("j", g2)];
        assert_eq!(average_precision(&[ib("i", det(g, 0.5)), ib("j", det(g2, 0.6))], &gt2, 0.5), 1.0);
        assert_eq!(average_precision(&[], &gt, 0.5), 0.0);
    }

    #[test]
    fn map_averages_over_classes() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let gt = [ib("i", (g, "a".to_string())), ib("i", (g, "b".to_string()))];
        let dets = [ib("i", ScoredBox::new(g, "a", 0.9).unwrap())];
        assert_eq!(map_at_50(&dets, &gt), 0.5);
    }

    #[test]
    fn roc_extremes_and_selection() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let pos = [FrameResult { frame: "p".into(), detections: vec![det(g, 0.6)], gt: vec![g] }];
        let neg = [FrameResult { frame: "n".into(), detections: vec![det(g, 0.3)], gt: vec![] }];
        let pts = roc_points(&pos, &neg, &[1.0, 0.5, 0.0]).unwrap();
        assert_eq!((pts[0].tpr, pts[0].fpr), (0.0, 0.0));
        assert_eq!((pts[1].tpr, pts[1].fpr), (1.0, 0.0));
        assert_eq!((pts[2].tpr, pts[2].fpr), (1.0, 1.0));
        assert_eq!(select_operating_point(&pts, 0.004).unwrap().threshold, 0.5);
        assert!(roc_points(&pos, &neg, &[]).is_err());
        let bad = [RocPoint { threshold: 0.1, tpr: 1.0, fpr: 0.5 }];
        assert_eq!(select_operating_point(&bad, 0.004), Err(EvalError::CutoffInfeasible(0.004)));
    }

    #[test]
    fn event_precision_recall_examples() {
        let (p, r) = event_precision_recall(194, 6, 59).unwrap();
        assert_eq!((crate::math::round(p * 100.0), crate::math::round(r * 100.0)), (77.0, 97.0));
        assert_eq!(event_precision_recall(10, 0, 0).unwrap(), (1.0, 1.0));
        assert_eq!(event_precision_recall(0, 5, 5).unwrap(), (0.0, 0.0));
        assert_eq!(event_precision_recall(0, 0, 5), Err(EvalError::DegenerateCounts));
        assert_eq!(event_precision_recall(0, 5, 0), Err(EvalError::DegenerateCounts));
    }

    #[test]
    fn classify_events_examples() {
        let s = Span::new(100.0, 200.0).unwrap();
        let c = classify_events(&[s], &[s]);
        assert_eq!(c.totals, EventCounts { tp: 1, fp: 0, fn_: 0 });
        let c = classify_events(&[Span::new(500.0, 600.0).unwrap()], &[]);
        assert_eq!(c.totals, EventCounts { tp: 0, fp: 1, fn_: 0 });
        // Overlapping sightings merge into one.
        let c = classify_events(&[], &[s, Span::new(150.0, 250.0).unwrap()]);
        assert_eq!(c.totals, EventCounts { tp: 0, fp: 0, fn_: 1 });
        assert!(Span::new(2.0, 1.0).is_err());
    }
}
