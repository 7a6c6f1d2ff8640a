use rads::config::ScenarioConfig;
use rads::pipeline::{self, Cloud};
use rads::state;
use rads::world::{FrameKey, World, WorldConfig};
use rads_core::eval::{merge_spans, Span};
use rads_core::math::budget_count;

/// Central 99% interval of Poisson(17): P(X <= 6) < 0.005 <= P(X <= 7) and
/// P(X <= 27) < 0.995 <= P(X <= 28).
const POISSON_17_99: (usize, usize) = (7, 28);

/// A run small enough for a unit of test time.
fn small(seed: u64, iterations: u32) -> ScenarioConfig {
    let text = format!(
        r#"{{
            "seed": {seed},
            "iterations": {iterations},
            "days_per_iteration": 1,
            "world": {{ "drift_day": null }},
            "stage1": {{ "web_images": 20, "backgrounds_per_camera": 10, "synthetic_images": 100, "negatives_per_camera": 30 }},
            "eval": {{ "cases_per_group": 4, "thermal_cases_per_group": 2, "frames_per_case": 4, "negatives": 60, "thermal_negatives": 20, "roc_steps": 20 }}
        }}"#
    );
    let cfg: ScenarioConfig = serde_json::from_str(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn a_week_of_sightings_is_poisson_plausible() {
    let (lo, hi) = POISSON_17_99;
    for seed in 0..10 {
        let w = World::new(WorldConfig::default(), seed);
        let n: usize = (0..7).map(|d| w.schedule(d).sightings.len()).sum();
        assert!((lo..=hi).contains(&n), "seed {seed}: {n} sightings in 7 days");
    }
}

#[test]
fn zero_rate_yields_no_target_frames() {
    let cfg = WorldConfig { sightings_per_week: 0.0, ..WorldConfig::default() };
    let w = World::new(cfg, 3);
    for day in 0..3 {
        let s = w.schedule(day);
        for index in (0..w.frames_per_day()).step_by(7) {
            for camera in 0..w.config.cameras.len() {
                let f = w.frame(FrameKey { camera, day, index }, &s);
                assert!(f.ground_truth.iter().all(|g| g.class != "cassowary"), "{}", f.id);
            }
        }
    }
}

#[test]
fn zero_iterations_reports_only_stage_one() {
    let out = pipeline::simulate(&small(5, 0), None).unwrap();
    let r = &out.report;
    assert_eq!(r.versions.len(), 1);
    assert_eq!(r.versions[0].version.id, 1);
    assert_eq!(r.versions[0].stage, 1);
    assert!(r.iterations.is_empty());
    assert_eq!(r.totals.frames_observed, 0);
}

#[test]
fn small_run_is_consistent_and_persists() {
    let cfg = small(21, 2);
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline::simulate(&cfg, Some(dir.path())).unwrap();
    let r = &out.report;

    assert_eq!(r.versions.len(), 3);
    assert_eq!(r.iterations.len(), 2);
    for (i, it) in r.iterations.iter().enumerate() {
        assert_eq!(it.deployed_version, i as u64 + 1);
        assert_eq!(it.trained_version, i as u64 + 2);
    }
    // Upload bound holds after every round.
    let mut seen = 0;
    let mut sent = 0;
    for it in &r.iterations {
        seen += it.frames_observed;
        sent += it.frames_uploaded;
        assert!(sent <= budget_count(cfg.edge.upload.budget_fraction, seen));
    }
    assert_eq!(r.totals.upload_cap, budget_count(cfg.edge.upload.budget_fraction, r.totals.frames_observed));

    // Every true sighting is either found or missed.
    let world = World::new(cfg.world.clone(), cfg.seed);
    let spans: Vec<Span> = (0..2)
        .flat_map(|d| world.schedule(d).sightings)
        .map(|s| Span::new(s.start, s.end()).unwrap())
        .collect();
    let e = r.totals.events;
    assert_eq!(e.tp + e.fn_, merge_spans(&spans).len() as u64);

    // State on disk reloads to the same registry and models.
    let st = dir.path().join("state");
    let registry = state::load_registry(&st).unwrap();
    assert_eq!(registry.active, Some(3));
    let models = state::load_models(&st).unwrap();
    assert_eq!(models.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
    let manifest = state::load_manifest(&st).unwrap();
    assert!(manifest.field_count() > 0);

    for f in ["report.json", "timings.json", "metrics.csv", "roc.csv", "pr.csv", "roc_rgb.svg", "pr_rgb.svg"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert!(dir.path().join("edge/continuous/log.jsonl").is_file());
    let events = std::fs::read_dir(dir.path().join("edge/events")).unwrap().count();
    assert_eq!(events as u64, e.tp + e.fp);
}

#[test]
fn stage_one_alone_matches_a_full_cloud_start() {
    let cfg = small(8, 1);
    let mut a = Cloud::new(cfg.clone()).unwrap();
    let mut b = Cloud::new(cfg).unwrap();
    a.run_stage1().unwrap();
    b.run_stage1().unwrap();
    assert_eq!(a.model_blob(), b.model_blob());
    assert_eq!(a.manifest.hash(), b.manifest.hash());
}
