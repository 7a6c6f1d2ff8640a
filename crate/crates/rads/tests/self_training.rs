use rads::config::ScenarioConfig;
use rads::pipeline;

/// Held-out mTPR should not drop from one version to the next in most seeds.
#[test]
fn mtpr_is_mostly_non_decreasing_across_seeds() {
    let seeds = 1..=10u64;
    let mut monotone = 0;
    let mut lines = Vec::new();
    for seed in seeds.clone() {
        let cfg = ScenarioConfig { seed, iterations: 3, ..ScenarioConfig::default() };
        let report = pipeline::simulate(&cfg, None).unwrap().report;
        let mtpr: Vec<f64> = report.versions.iter().map(|v| v.eval.pooled.mtpr.unwrap_or(0.0)).collect();
        assert_eq!(mtpr.len(), 4);
        let ok = mtpr.windows(2).all(|w| w[1] >= w[0]);
        monotone += usize::from(ok);
        lines.push(format!("seed {seed}: {mtpr:.4?} {}", if ok { "ok" } else { "dip" }));
    }
    let needed = (8 * seeds.count()).div_ceil(10);
    assert!(monotone >= needed, "{monotone} monotone seeds, need {needed}:\n{}", lines.join("\n"));
}
