use std::collections::BTreeSet;

use proptest::prelude::*;
use rads_core::cloud::{curate_training_set, CurationConfig, TrainingManifest};
use rads_core::edge::{
    bayes_step, event_state_step, fuse_cameras, select_upload, EdgeConfig, EdgeNode, EventParams, EventState,
    EventTransition, FilterParams, FrameRef, PresenceBelief, UploadCandidate, UploadPolicy,
};
use rads_core::eval::{average_precision, ImageBox};
use rads_core::geom::{iou, nms};
use rads_core::label::{
    augmented_logit, expand_labels, Embedding, EmbeddingTableBackend, HierarchySpec, LabelHierarchy, NodeSpec,
    PseudoLabelSet,
};
use rads_core::math::budget_count;
use rads_core::raster::{Modality, RasterImage};
use rads_core::synth::{blend_into, gaussian_kernel, MaskedInstance};
use rads_core::wire::{decode, encode, BandwidthLedger, Message, MessageKind, SendOutcome};
use rads_core::{BBox, ImageDims, ScoredBox};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
}

fn scored() -> impl Strategy<Value = ScoredBox> {
    (bbox(), 0.0..=1.0f64, 0..3u8).prop_map(|(b, s, l)| ScoredBox::new(b, format!("c{l}"), s).unwrap())
}

/// Greedy suppression written from the definition, with the documented
/// tie-break: score desc, then area desc, then input order.
fn nms_oracle(c: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| {
        c[b].score
            .partial_cmp(&c[a].score)
            .unwrap()
            .then(c[b].bbox.area().partial_cmp(&c[a].bbox.area()).unwrap())
            .then(a.cmp(&b))
    });
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou(&k.bbox, &c[i].bbox) < thr) {
            kept.push(c[i].clone());
        }
    }
    kept
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let x = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_matches_oracle_and_is_idempotent(c in prop::collection::vec(scored(), 0..25), thr in 0.05..=1.0f64) {
        let out = nms(&c, thr).unwrap();
        prop_assert_eq!(&out, &nms_oracle(&c, thr));
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) < thr);
            }
        }
        prop_assert_eq!(nms(&out, thr).unwrap(), out);
    }

    #[test]
    fn fusion_is_monotone(ps in prop::collection::vec(0.0..=1.0f64, 1..6), extra in 0.0..=1.0f64) {
        let beliefs: Vec<PresenceBelief> = ps.iter().map(|p| PresenceBelief::new("c", *p, 0.0)).collect();
        let base = fuse_cameras(&beliefs);
        let mut more = beliefs.clone();
        more.push(PresenceBelief::new("d", extra, 0.0));
        prop_assert!(fuse_cameras(&more) >= base - 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn posterior_stays_a_probability(p in 0.0..=1.0f64, lr in 1e-6..1e6f64, dt in 0.0..1e4f64) {
        let q = bayes_step(p, lr, dt, &FilterParams::default());
        prop_assert!(q.is_finite());
        prop_assert!((0.0..=1.0).contains(&q));
    }

    #[test]
    fn codec_round_trips(tag in 1u8..=5, seq in any::<u64>(), payload in prop::collection::vec(any::<u8>(), 0..300)) {
        let m = Message::new(MessageKind::from_tag(tag).unwrap(), seq, payload);
        let bytes = encode(&m).unwrap();
        prop_assert_eq!(bytes.len(), 45 + m.payload().len());
        prop_assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn corruption_is_detected(payload in prop::collection::vec(any::<u8>(), 1..200), at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let bytes = encode(&Message::new(MessageKind::FrameBatch, 7, payload)).unwrap();
        // Flip a byte in the hash or payload region.
        let i = 13 + at.index(bytes.len() - 13);
        let mut bad = bytes.clone();
        bad[i] ^= flip;
        prop_assert!(decode(&bad).is_err());
    }

    #[test]
    fn ledger_never_exceeds_window_budget(
        sends in prop::collection::vec((1u64..400, 0.0..3.0f64), 1..80),
        budget in 400u64..2000,
    ) {
        let mut ledger = BandwidthLedger::new(budget, 5.0, 0.0);
        let mut now = 0.0;
        let mut order = Vec::new();
        let mut released = Vec::new();
        for (i, (size, dt)) in sends.iter().enumerate() {
            now += dt;
            let mut frame = vec![0u8; *size as usize];
            frame[0] = i as u8;
            order.push(i as u8);
            for f in ledger.release(now) {
                released.push(f[0]);
            }
            if let SendOutcome::Sent(f) = ledger.send_with_budget(frame, now).unwrap() {
                released.push(f[0]);
            }
            prop_assert!(ledger.sent_in_window <= ledger.budget);
        }
        // Drain and check FIFO delivery of everything.
        while ledger.queued() > 0 {
            now = ledger.next_window();
            for f in ledger.release(now) {
                released.push(f[0]);
            }
            prop_assert!(ledger.sent_in_window <= ledger.budget);
        }
        prop_assert_eq!(released, order);
    }

    #[test]
    fn upload_budget_holds(
        dets in prop::collection::vec(prop::option::of(0.0..=1.0f64), 0..600),
        fraction in 0.001..=1.0f64,
        seed in any::<u64>(),
    ) {
        let window: Vec<UploadCandidate> = dets
            .iter()
            .enumerate()
            .map(|(i, d)| UploadCandidate {
                frame: FrameRef { id: format!("f{i}"), camera: "c".into(), timestamp: i as f64 },
                detections: d.map(|s| vec![ScoredBox::new(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), "x", s).unwrap()]).unwrap_or_default(),
            })
            .collect();
        let policy = UploadPolicy { budget_fraction: fraction, seed, ..UploadPolicy::default() };
        let batch = select_upload(&window, &policy, 0, None).unwrap();
        let cap = budget_count(fraction, window.len());
        prop_assert!(batch.frames.len() <= cap);
        let with_dets = dets.iter().filter(|d| d.is_some()).count();
        prop_assert_eq!(batch.frames.len(), cap.min(window.len()).max(cap.min(with_dets)));
        let ids: BTreeSet<&str> = batch.frames.iter().map(|f| f.frame.id.as_str()).collect();
        prop_assert_eq!(ids.len(), batch.frames.len());
    }

    #[test]
    fn events_respect_hold(trace in prop::collection::vec(0.0..=1.0f64, 1..300)) {
        let params = EventParams::default();
        let mut state = EventState::Idle;
        let mut next = 0;
        for (i, f) in trace.iter().enumerate() {
            let now = i as f64 * 0.5;
            let (s, t) = event_state_step(state, *f, now, next, &params);
            match t {
                Some(EventTransition::Opened { .. }) => next += 1,
                Some(EventTransition::Closed { trigger, end, .. }) => {
                    prop_assert!(end >= trigger);
                    prop_assert!(now - end >= params.hold);
                }
                None => {}
            }
            state = s;
        }
    }

    #[test]
    fn continuous_log_scales_with_stride(n in 0usize..200, stride in 1u64..20) {
        let mut node = EdgeNode::new(EdgeConfig { log_stride: stride, ..EdgeConfig::default() });
        for i in 0..n {
            node.record(FrameRef { id: format!("{i}"), camera: "c".into(), timestamp: i as f64 }, Vec::new());
        }
        prop_assert_eq!(node.continuous_log().len(), n.div_ceil(stride as usize));
    }

    #[test]
    fn field_cap_holds_after_every_curation(batches in prop::collection::vec(0usize..40, 1..12), cap in 10usize..60) {
        let cfg = CurationConfig { min_field: 5.min(cap), max_field: cap, validation_size: 8, ..CurationConfig::default() };
        let mut m = TrainingManifest::new(cfg).unwrap();
        let mut previous = 0;
        for (it, n) in batches.iter().enumerate() {
            let new: Vec<PseudoLabelSet> = (0..*n)
                .map(|j| PseudoLabelSet {
                    image: format!("{it}-{j}"),
                    boxes: if j % 3 == 0 { Vec::new() } else { vec![ScoredBox::new(BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(), "t", 0.9).unwrap()] },
                    backend: "b".into(),
                    threshold: 0.65,
                    iou_threshold: 0.5,
                })
                .collect();
            m = curate_training_set(&m, &new, Modality::Rgb, it as u64 + 1).unwrap();
            prop_assert!(m.field_count() <= cap);
            prop_assert_eq!(m.field_count(), (previous + n).min(cap));
            previous = m.field_count();
            let train: BTreeSet<&str> = m.training_entries().map(|e| e.image.as_str()).collect();
            prop_assert!(m.validation.iter().all(|v| !train.contains(v.as_str())));
        }
    }
}

fn tiny_hierarchy() -> LabelHierarchy {
    let node = |name: &str, parents: &[&str], synonyms: &[&str]| NodeSpec {
        name: name.into(),
        parents: parents.iter().map(|s| s.to_string()).collect(),
        synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
        ..NodeSpec::default()
    };
    LabelHierarchy::from_spec(&HierarchySpec {
        nodes: vec![
            node("animal", &[], &[]),
            node("bird", &["animal"], &["avian"]),
            node("ratite", &["bird"], &[]),
            node("target", &["ratite"], &["target bird"]),
            node("emu", &["ratite"], &[]),
        ],
    })
    .unwrap()
}

const LABELS: [&str; 7] = ["animal", "bird", "avian", "ratite", "target", "target bird", "emu"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn deeper_expansion_never_lowers_the_logit(
        embeddings in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), LABELS.len()),
        region in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        prop_assume!(embeddings.iter().chain([&region]).all(|e| e.iter().any(|v| v.abs() > 1e-3)));
        let mut backend = EmbeddingTableBackend::new("t");
        for (l, e) in LABELS.iter().zip(&embeddings) {
            backend = backend.with_label(*l, Embedding::new(e.clone()).unwrap());
        }
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        backend = backend.with_region("img", b, Embedding::new(region).unwrap());
        let region = rads_core::label::ScoringBackend::propose(&backend, "img", &()).unwrap().remove(0);
        let h = tiny_hierarchy();
        let mut last = f64::NEG_INFINITY;
        for depth in 0..4 {
            let set = expand_labels(&h, "target", depth, false).unwrap();
            let (score, _) = augmented_logit(&region, &set, &backend).unwrap();
            prop_assert!(score >= last);
            last = score;
        }
    }

    #[test]
    fn blend_is_local_and_convex(
        bg_val in 0u8..=255,
        patch_val in 0u8..=255,
        w in 1u32..8,
        h in 1u32..8,
        x in -6i64..30,
        y in -6i64..30,
        sigma in 0.0..2.5f64,
    ) {
        let dims = ImageDims::new(32, 24).unwrap();
        let bg = RasterImage::filled(dims, 1, &[bg_val]).unwrap();
        let pdims = ImageDims::new(w, h).unwrap();
        let patch = RasterImage::filled(pdims, 1, &[patch_val]).unwrap();
        let inst = MaskedInstance::new(patch, vec![1.0; (w * h) as usize], "s".into(), "t".into()).unwrap();
        let out = match blend_into(&inst, &bg, (x, y), sigma) {
            Ok(o) => o.image,
            Err(_) => return Ok(()),
        };
        let r = (gaussian_kernel(sigma).len() / 2) as i64;
        let (lo, hi) = (bg_val.min(patch_val), bg_val.max(patch_val));
        for py in 0..24i64 {
            for px in 0..32i64 {
                let v = out.pixel(px as u32, py as u32)[0];
                prop_assert!(v >= lo && v <= hi);
                let far = px < x - r || px >= x + i64::from(w) + r || py < y - r || py >= y + i64::from(h) + r;
                if far {
                    prop_assert_eq!(v, bg_val);
                }
            }
        }
    }
}

/// All-point interpolated AP computed from an explicit precision/recall
/// table over every score cutoff.
fn ap_oracle(dets: &[(f64, BBox)], gt: &[BBox]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.partial_cmp(&dets[a].0).unwrap());
    let mut used = vec![false; gt.len()];
    let mut tp_flags = Vec::new();
    for i in order {
        let mut best = None;
        let mut best_iou = 0.5;
        for (g, b) in gt.iter().enumerate() {
            let o = iou(&dets[i].1, b);
            if o >= best_iou && !used[g] {
                best_iou = o;
                best = Some(g);
            }
        }
        match best {
            Some(g) => {
                used[g] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    let n = tp_flags.len();
    let mut table = Vec::new();
    let mut tp = 0.0;
    for (k, f) in tp_flags.iter().enumerate() {
        if *f {
            tp += 1.0;
        }
        table.push((tp / gt.len() as f64, tp / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        if tp_flags[k] {
            let recall = table[k].0;
            let p_interp = table[k..].iter().map(|t| t.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * p_interp;
            prev_recall = recall;
        }
    }
    ap
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn average_precision_matches_oracle(
        gt in prop::collection::vec(bbox(), 0..6),
        noise in prop::collection::vec((bbox(), any::<bool>(), 0usize..6), 0..12),
    ) {
        // Mix near-copies of ground truth with random boxes; scores distinct.
        let dets: Vec<(f64, BBox)> = noise
            .iter()
            .enumerate()
            .map(|(i, (b, copy, g))| {
                let b = if *copy && !gt.is_empty() { gt[g % gt.len()] } else { *b };
                (1.0 - i as f64 / 100.0 - (g % 3) as f64 / 1000.0, b)
            })
            .collect();
        let dets_ib: Vec<ImageBox<ScoredBox>> = dets
            .iter()
            .map(|(s, b)| ImageBox { image: "i".into(), item: ScoredBox::new(*b, "t", *s).unwrap() })
            .collect();
        let gt_ib: Vec<ImageBox<BBox>> = gt.iter().map(|b| ImageBox { image: "i".into(), item: *b }).collect();
        let got = average_precision(&dets_ib, &gt_ib, 0.5);
        prop_assert!((got - ap_oracle(&dets, &gt)).abs() < 1e-9, "{} vs {}", got, ap_oracle(&dets, &gt));
    }
}

#[test]
fn no_detection_updates_converge_to_fixed_point() {
    let p = FilterParams::default();
    let dt = 1.0;
    let f = |q: f64| bayes_step(q, p.lr_nodet, dt, &p);
    // Bisection on g(q) = f(q) - q, independent of the iteration below.
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) - mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let fixed = 0.5 * (lo + hi);
    for start in [0.0, 0.3, 0.999] {
        let mut q = start;
        for _ in 0..5000 {
            q = f(q);
        }
        assert!((q - fixed).abs() < 1e-9, "{start}: {q} vs {fixed}");
    }
    assert!(fixed > 0.0 && fixed < p.p0);
}
