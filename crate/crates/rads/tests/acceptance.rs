//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line;
//! the test fails if any of them fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rads::ablation;
use rads::config::ScenarioConfig;
use rads::evaluation::EvalStream;
use rads::pipeline::{self, RunReport};
use rads::transport::{LossyPipe, Session, Timing};
use rads::world::World;
use rads_core::eval::{average_precision, event_precision_recall, ImageBox};
use rads_core::geom::{iou, nms};
use rads_core::label::{
    augmented_logit, expand_labels, AffinityTable, OracleConfig, OracleScene, SceneObject, ScoringBackend,
    SimulatedOracleBackend,
};
use rads_core::math::{budget_count, rng_for};
use rads_core::raster::RasterImage;
use rads_core::synth::{blend_into, MaskedInstance};
use rads_core::wire::{decode, encode, payload_hash, Message, MessageKind};
use rads_core::{BBox, ImageDims, ScoredBox};
use rand::Rng;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Check {
    let t = Instant::now();
    let (pass, detail) = f();
    Check { name, pass, detail, elapsed: t.elapsed() }
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

fn event_table() -> (bool, String) {
    let (p, r) = event_precision_recall(194, 6, 59).unwrap();
    let round = |v: f64| (v * 100.0).round() / 100.0;
    let pass = round(p) == 0.77 && round(r) == 0.97;
    (pass, format!("precision {p:.4} recall {r:.4}"))
}

fn augmented_monotone() -> (bool, String) {
    let cfg = ScenarioConfig::default();
    let h = cfg.labelling.load_hierarchy().unwrap();
    let target = "cassowary";
    let classes = ["cassowary", "pig", "stump", "person"];
    let labels: Vec<String> = h.names().map(str::to_string).collect();
    let mut rng = rng_for(2, &[]);
    let dims = ImageDims::new(64, 48).unwrap();
    let mut violations = 0;
    let mut cases = 0;
    while cases < 10_000 {
        let mut table = AffinityTable::default();
        for c in classes {
            for l in &labels {
                if rng.random_bool(0.7) {
                    table.set(c, l, rng.random_range(0.0..1.0));
                }
            }
        }
        let backend = SimulatedOracleBackend::new(OracleConfig {
            affinity: table,
            noise_amplitude: rng.random_range(0.0..0.2),
            seed: rng.random(),
            ..OracleConfig::default()
        })
        .unwrap();
        let objects = (0..rng.random_range(1..4))
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..30.0));
                let (w, hgt) = (rng.random_range(4.0..20.0), rng.random_range(4.0..16.0));
                SceneObject {
                    bbox: BBox::from_xywh(x, y, w, hgt).unwrap(),
                    class: classes[rng.random_range(0..classes.len())].to_string(),
                }
            })
            .collect();
        let scene = OracleScene { dims, objects };
        let depth = rng.random_range(1..4);
        let set = expand_labels(&h, target, depth, rng.random_bool(0.5)).unwrap();
        for region in backend.propose("img", &scene).unwrap() {
            let (aug, _) = augmented_logit(&region, &set, &backend).unwrap();
            let plain = backend.logit(&region, target).unwrap();
            violations += usize::from(aug < plain);
            cases += 1;
        }
    }
    (violations == 0, format!("{cases} regions, {violations} violations"))
}

/// Enumerates every subset and keeps the one that is a fixed point of the
/// suppression rule: a box is in iff no higher-priority member overlaps it.
fn brute_force_nms(c: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
    let n = c.len();
    let higher = |a: usize, b: usize| {
        let (x, y) = (&c[a], &c[b]);
        x.score > y.score
            || (x.score == y.score && x.bbox.area() > y.bbox.area())
            || (x.score == y.score && x.bbox.area() == y.bbox.area() && a < b)
    };
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| j != i && inside(j) && higher(j, i) && iou(&c[j].bbox, &c[i].bbox) >= thr);
            inside(i) != blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "suppression fixed point must be unique");
    let mut kept: Vec<usize> = (0..n).filter(|i| found[0] & (1 << i) != 0).collect();
    kept.sort_by(|&a, &b| if higher(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept.into_iter().map(|i| c[i].clone()).collect()
}

fn nms_equivalence() -> (bool, String) {
    let mut rng = rng_for(3, &[]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..=8);
        let set: Vec<ScoredBox> = (0..n)
            .map(|_| {
                let b = BBox::from_xywh(
                    rng.random_range(0.0..20.0),
                    rng.random_range(0.0..20.0),
                    rng.random_range(2.0..12.0),
                    rng.random_range(2.0..12.0),
                )
                .unwrap();
                // Coarse scores so ties are common.
                let s = f64::from(rng.random_range(0..6u8)) / 5.0;
                ScoredBox::new(b, "x", s).unwrap()
            })
            .collect();
        let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        if nms(&set, thr).unwrap() != brute_force_nms(&set, thr) {
            mismatches += 1;
        }
    }
    (mismatches == 0, format!("1000 sets, {mismatches} mismatches"))
}

/// All-point interpolated AP: integrate, over each recall step, the best
/// precision reached at that recall or beyond.
fn brute_force_ap(dets: &[ImageBox<ScoredBox>], gt: &[ImageBox<BBox>]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].item.score.total_cmp(&dets[a].item.score).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let d = &dets[i];
        let best = (0..gt.len())
            .filter(|&g| !taken[g] && gt[g].image == d.image)
            .map(|g| (iou(&d.item.bbox, &gt[g].item), g))
            .filter(|(o, _)| *o >= 0.5)
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        if let Some((_, g)) = best {
            taken[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / gt.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|r| *r > 0.0).collect();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

fn ap_equivalence() -> (bool, String) {
    let mut rng = rng_for(4, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let images = rng.random_range(1..4);
        let mut gt = Vec::new();
        for i in 0..images {
            for _ in 0..rng.random_range(0..4) {
                let b = BBox::from_xywh(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), 8.0, 8.0).unwrap();
                gt.push(ImageBox { image: format!("i{i}"), item: b });
            }
        }
        let n = rng.random_range(0..=20);
        let mut scores: Vec<u32> = (0..1000).collect();
        for k in 0..n {
            let j = rng.random_range(k..scores.len());
            scores.swap(k, j);
        }
        let dets: Vec<ImageBox<ScoredBox>> = (0..n)
            .map(|k| {
                let img = rng.random_range(0..images);
                let near: Vec<&ImageBox<BBox>> = gt.iter().filter(|g| g.image == format!("i{img}")).collect();
                let b = if !near.is_empty() && rng.random_bool(0.6) {
                    let g = near[rng.random_range(0..near.len())].item;
                    let (dx, dy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                    BBox::new(g.x_min() + dx, g.y_min() + dy, g.x_max() + dx, g.y_max() + dy).unwrap()
                } else {
                    BBox::from_xywh(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), 8.0, 8.0).unwrap()
                };
                let s = f64::from(scores[k]) / 1000.0;
                ImageBox { image: format!("i{img}"), item: ScoredBox::new(b, "t", s).unwrap() }
            })
            .collect();
        let got = average_precision(&dets, &gt, 0.5);
        worst = worst.max((got - brute_force_ap(&dets, &gt)).abs());
    }
    (worst <= 1e-9, format!("200 datasets, max |diff| {worst:.2e}"))
}

fn ablation_trend() -> (bool, String) {
    let cfg = ScenarioConfig::default();
    let world = World::new(cfg.world.clone(), cfg.seed);
    let stream = EvalStream::generate(&cfg, &world).unwrap();
    let rows = ablation::run(&cfg, &world, &stream, &ablation::THRESHOLDS).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for r in &rows {
        let ok = if r.threshold < 0.5 {
            (r.augmented_map - r.plain_map).abs() <= 0.05
        } else {
            r.augmented_map > r.plain_map
        };
        pass &= ok;
        detail.push(format!("@{:.1} {:.3}/{:.3}", r.threshold, r.augmented_map, r.plain_map));
    }
    (pass, format!("augmented/plain mAP {}", detail.join(" ")))
}

fn uploads_within_budget(report: &RunReport, fraction: f64) -> bool {
    let mut observed = 0;
    let mut uploaded = 0;
    for it in &report.iterations {
        observed += it.frames_observed;
        uploaded += it.frames_uploaded;
        if uploaded > budget_count(fraction, observed) {
            return false;
        }
    }
    report.totals.frames_uploaded <= budget_count(fraction, report.totals.frames_observed)
}

fn transport_integrity() -> (bool, String) {
    let mut rng = rng_for(9, &[]);
    let kinds = [MessageKind::ModelUpdate, MessageKind::FrameBatch, MessageKind::Heartbeat];
    let mut codec_failures = 0;
    for seq in 0..10_000u64 {
        let len = rng.random_range(0..200);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let m = Message::new(kinds[rng.random_range(0..kinds.len())], seq, payload);
        let back = decode(&encode(&m).unwrap()).unwrap();
        codec_failures += usize::from(back != m);
    }

    let payloads: Vec<Vec<u8>> = (0..10_000u32)
        .map(|i| {
            let len = rng.random_range(1..64);
            let mut p: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            p.extend(i.to_be_bytes());
            p
        })
        .collect();
    let sent: Vec<[u8; 32]> = payloads.iter().map(|p| payload_hash(p)).collect();
    let (a, b) = LossyPipe::pair(0.2, 17);
    let sender = std::thread::spawn(move || {
        let mut s = Session::new(a, 32, Timing::in_process());
        for p in payloads {
            s.send(MessageKind::FrameBatch, p).unwrap();
        }
        s.drain().unwrap();
    });
    let mut r = Session::new(b, 32, Timing::in_process());
    let mut got = Vec::with_capacity(sent.len());
    for _ in 0..sent.len() {
        got.push(*r.recv().unwrap().hash());
    }
    r.linger(Duration::from_secs(10)).unwrap();
    sender.join().unwrap();
    let stats = r.stats();
    let pass = codec_failures == 0 && got == sent;
    (pass, format!("codec failures {codec_failures}, delivered {} in order: {}, receiver saw {} out-of-order", got.len(), got == sent, stats.out_of_order))
}

fn blend_locality() -> (bool, String) {
    let mut rng = rng_for(10, &[]);
    let dims = ImageDims::new(48, 40).unwrap();
    let mut leaks = 0;
    for _ in 0..1000 {
        let channels = if rng.random_bool(0.5) { 1 } else { 3 };
        let bg_pixels: Vec<u8> = (0..dims.width * dims.height * u32::from(channels)).map(|_| rng.random()).collect();
        let bg = RasterImage::new(dims, channels, bg_pixels).unwrap();
        let (w, h) = (rng.random_range(1..14u32), rng.random_range(1..14u32));
        let patch_pixels: Vec<u8> = (0..w * h * u32::from(channels)).map(|_| rng.random()).collect();
        let patch = RasterImage::new(ImageDims::new(w, h).unwrap(), channels, patch_pixels).unwrap();
        let alpha: Vec<f64> = (0..w * h)
            .map(|_| match rng.random_range(0..3) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let support: Vec<(i64, i64)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| alpha[(y * w + x) as usize] > 0.0)
            .map(|(x, y)| (i64::from(x), i64::from(y)))
            .collect();
        let Ok(inst) = MaskedInstance::new(patch, alpha, "s".into(), "t".into()) else { continue };
        let sigma = rng.random_range(0.0..3.0);
        let pos = (rng.random_range(-10..50i64), rng.random_range(-10..42i64));
        let Ok(out) = blend_into(&inst, &bg, pos, sigma) else { continue };
        let r = (3.0 * sigma).ceil() as i64;
        for y in 0..i64::from(dims.height) {
            for x in 0..i64::from(dims.width) {
                let near = support.iter().any(|&(sx, sy)| (x - pos.0 - sx).abs() <= r && (y - pos.1 - sy).abs() <= r);
                if !near && out.image.pixel(x as u32, y as u32) != bg.pixel(x as u32, y as u32) {
                    leaks += 1;
                }
            }
        }
    }
    (leaks == 0, format!("1000 composites, {leaks} pixels changed outside the dilated support"))
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rads")).args(args).output().expect("running rads")
}

fn determinism(budget_ok: &mut Vec<bool>) -> (bool, String) {
    let golden = golden_dir();
    let config = golden.join("config.json");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = run_cli(&["simulate", "--config", config.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
        if !out.status.success() {
            return (false, format!("simulate failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    let mut differing = Vec::new();
    for f in ["report.json", "metrics.csv", "roc.csv", "pr.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        if a != b {
            differing.push(format!("{f} differs between runs"));
        }
        if f != "report.json" && std::fs::read(golden.join("run").join(f)).ok() != Some(a) {
            differing.push(format!("{f} differs from the committed golden file"));
        }
    }
    let text = std::fs::read_to_string(dirs[0].path().join("report.json")).unwrap();
    let report: RunReport = serde_json::from_str(&text).unwrap();
    let cfg = ScenarioConfig::load(config.to_str().unwrap()).unwrap();
    budget_ok.push(uploads_within_budget(&report, cfg.edge.upload.budget_fraction));
    let pass = differing.is_empty();
    (pass, if pass { "report.json and CSVs byte-identical, golden CSVs match".into() } else { differing.join("; ") })
}

#[test]
fn acceptance_criteria() {
    println!();
    let mut checks = vec![
        timed("1 event precision/recall", event_table),
        timed("2 augmented logit >= plain", augmented_monotone),
        timed("3 NMS vs brute force", nms_equivalence),
        timed("4 AP vs brute force", ap_equivalence),
        timed("5 LA-NMS ablation trend", ablation_trend),
    ];

    let cfg = ScenarioConfig::default();
    let t = Instant::now();
    let run = pipeline::simulate(&cfg, None).expect("default run");
    let run_time = t.elapsed();
    let report = &run.report;

    checks.push({
        let first = &report.versions[0].eval.pooled;
        let last = &report.versions.last().unwrap().eval.pooled;
        let (s1, fin) = (first.mtpr.unwrap_or(0.0), last.mtpr.unwrap_or(0.0));
        let near_over_far = report
            .versions
            .iter()
            .all(|v| v.eval.pooled.mtpr_near.unwrap_or(0.0) > v.eval.pooled.mtpr_far.unwrap_or(0.0));
        let per: Vec<String> = report
            .versions
            .iter()
            .map(|v| {
                format!("v{} {:.3}/{:.3}", v.version.id, v.eval.pooled.mtpr_near.unwrap_or(0.0), v.eval.pooled.mtpr_far.unwrap_or(0.0))
            })
            .collect();
        let pass = report.iterations.len() == 5 && fin >= 3.0 * s1 && near_over_far && run_time < Duration::from_secs(180);
        Check {
            name: "6 self-training gain",
            pass,
            detail: format!("stage 1 mTPR {s1:.4}, final {fin:.4}; near/far {}", per.join(" ")),
            elapsed: run_time,
        }
    });

    checks.push({
        let drift_day = cfg.world.drift_day.unwrap();
        let pre = report.iterations.iter().rfind(|it| f64::from(it.days[0]) < drift_day);
        let detail;
        let pass = match pre.map(|it| it.deployed_version) {
            None => {
                detail = "no pre-drift model".to_string();
                false
            }
            Some(v) => {
                // The last model trained only on pre-drift data is the one
                // deployed when the drift starts.
                let deployed = report
                    .iterations
                    .iter()
                    .find(|it| f64::from(it.days[0]) >= drift_day)
                    .map(|it| it.deployed_version)
                    .unwrap_or(v + 1);
                let e = report.eval(deployed).unwrap().pooled;
                let next = report.eval(deployed + 1).map(|e| e.pooled);
                let (dry, wet) = (e.fpr_dry.unwrap_or(0.0), e.fpr_wet.unwrap_or(0.0));
                let after = next.and_then(|n| n.fpr_wet).unwrap_or(f64::INFINITY);
                detail = format!(
                    "v{deployed}: dry FPR {dry:.4}, wet FPR {wet:.4}; v{}: wet FPR {after:.4}",
                    deployed + 1
                );
                wet > 0.0 && wet >= 1.5 * dry && after < wet
            }
        };
        Check { name: "7 drift and recovery", pass: pass && run_time < Duration::from_secs(180), detail, elapsed: run_time }
    });

    let mut budget_ok = vec![uploads_within_budget(report, cfg.edge.upload.budget_fraction)];
    let budget_detail = format!(
        "default run: {} uploaded of {} observed (cap {})",
        report.totals.frames_uploaded, report.totals.frames_observed, report.totals.upload_cap
    );

    let transport = timed("9 transport integrity", transport_integrity);
    let blend = timed("10 blend locality", blend_locality);
    let determinism = timed("11 determinism", || determinism(&mut budget_ok));
    checks.push(Check {
        name: "8 upload budget",
        pass: budget_ok.iter().all(|b| *b),
        detail: format!("{budget_detail}; {} seeded runs checked", budget_ok.len()),
        elapsed: Duration::ZERO,
    });
    checks.push(transport);
    checks.push(blend);
    checks.push(determinism);

    let limits = [
        ("1 ", Duration::from_secs(1)),
        ("2 ", Duration::from_secs(5)),
        ("3 ", Duration::from_secs(5)),
        ("4 ", Duration::from_secs(5)),
        ("5 ", Duration::from_secs(30)),
        ("9 ", Duration::from_secs(30)),
        ("10 ", Duration::from_secs(10)),
    ];
    for c in &mut checks {
        if let Some((_, limit)) = limits.iter().find(|(p, _)| c.name.starts_with(p)) {
            if c.elapsed > *limit {
                c.pass = false;
                c.detail.push_str(&format!(" (over the {limit:?} limit)"));
            }
        }
    }
    for c in &checks {
        println!("{} {:<28} {:>8.2}s  {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.elapsed.as_secs_f64(), c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
