//! Metrics CSV, ROC/PR curve CSVs and their SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rads_core::raster::Modality;

use crate::evaluation::ModelEval;
use crate::pipeline::RunReport;

pub const METRICS_HEADER: &str = "model,modality,range_group,metric,value";

pub fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Rgb => "rgb",
        Modality::Thermal => "thermal",
    }
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// One row per model x modality x range group x metric; absent metrics are
/// left out.
pub fn metrics_csv(evals: &[&ModelEval]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for e in evals {
        let p = &e.pooled;
        let pooled = [
            ("near", "mtpr", p.mtpr_near),
            ("far", "mtpr", p.mtpr_far),
            ("all", "mtpr", p.mtpr),
            ("all", "fpr_dry", p.fpr_dry),
            ("all", "fpr_wet", p.fpr_wet),
        ];
        for (group, metric, value) in pooled {
            if let Some(v) = value {
                let _ = writeln!(s, "v{},all,{group},{metric},{}", e.version, num(v));
            }
        }
        for m in &e.modalities {
            let tag = modality_name(m.modality);
            let rows = [
                ("near", "mtpr", m.mtpr_near),
                ("far", "mtpr", m.mtpr_far),
                ("all", "mtpr", m.mtpr),
                ("all", "fpr_dry", m.fpr_dry),
                ("all", "fpr_wet", m.fpr_wet),
                ("all", "map50", m.map50),
                ("all", "threshold", Some(m.threshold)),
                ("all", "calibrated_threshold", Some(m.calibrated_threshold)),
            ];
            for (group, metric, value) in rows {
                if let Some(v) = value {
                    let _ = writeln!(s, "v{},{tag},{group},{metric},{}", e.version, num(v));
                }
            }
        }
    }
    s
}

pub fn roc_csv(evals: &[&ModelEval]) -> String {
    let mut s = String::from("model,modality,threshold,tpr,fpr\n");
    for e in evals {
        for m in &e.modalities {
            for p in &m.roc {
                let _ = writeln!(
                    s,
                    "v{},{},{},{},{}",
                    e.version,
                    modality_name(m.modality),
                    num(p.threshold),
                    num(p.tpr),
                    num(p.fpr)
                );
            }
        }
    }
    s
}

pub fn pr_csv(evals: &[&ModelEval]) -> String {
    let mut s = String::from("model,modality,score,recall,precision\n");
    for e in evals {
        for m in &e.modalities {
            for p in &m.pr {
                let _ = writeln!(
                    s,
                    "v{},{},{},{},{}",
                    e.version,
                    modality_name(m.modality),
                    num(p.score),
                    num(p.recall),
                    num(p.precision)
                );
            }
        }
    }
    s
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Line plot on unit axes; each series is `(label, points)`.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, x_max: f64, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (480.0, 360.0, 50.0);
    let (pw, ph) = (w - 2.0 * pad, h - 2.0 * pad);
    let x_max = if x_max > 0.0 { x_max } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{x_label}</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{y_label}</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="{}" font-size="10" text-anchor="middle">0</text>"#, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{x_max}</text>"#, w - pad, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">1</text>"#, pad - 4.0, pad + 4.0);
    for (i, (label, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let px = pad + (x / x_max).clamp(0.0, 1.0) * pw;
                let py = pad + (1.0 - y.clamp(0.0, 1.0)) * ph;
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = pad + 14.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="10" fill="{colour}">{label}</text>"#, w - pad - 70.0);
    }
    s.push_str("</svg>\n");
    s
}

fn curves(evals: &[&ModelEval], m: Modality, roc: bool) -> Vec<(String, Vec<(f64, f64)>)> {
    evals
        .iter()
        .filter_map(|e| {
            let me = e.get(m)?;
            let pts = if roc {
                let mut p: Vec<(f64, f64)> = me.roc.iter().map(|p| (p.fpr, p.tpr)).collect();
                p.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                p
            } else {
                me.pr.iter().map(|p| (p.recall, p.precision)).collect()
            };
            Some((format!("v{}", e.version), pts))
        })
        .collect()
}

/// Writes `metrics.csv`, `roc.csv`, `pr.csv` and one ROC and PR plot per modality.
pub fn write_evals(out: &Path, evals: &[&ModelEval]) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(evals))?;
    std::fs::write(out.join("roc.csv"), roc_csv(evals))?;
    std::fs::write(out.join("pr.csv"), pr_csv(evals))?;
    for m in [Modality::Rgb, Modality::Thermal] {
        let roc = curves(evals, m, true);
        if roc.is_empty() {
            continue;
        }
        let tag = modality_name(m);
        let x_max = roc.iter().flat_map(|s| s.1.iter().map(|p| p.0)).fold(0.0, f64::max);
        let svg = svg_plot(&format!("ROC ({tag})"), "false positive rate", "mTPR", x_max, &roc);
        std::fs::write(out.join(format!("roc_{tag}.svg")), svg)?;
        let pr = curves(evals, m, false);
        let svg = svg_plot(&format!("Precision-recall ({tag})"), "recall", "precision", 1.0, &pr);
        std::fs::write(out.join(format!("pr_{tag}.svg")), svg)?;
    }
    Ok(())
}

pub fn write_all(out: &Path, report: &RunReport) -> Result<()> {
    let evals: Vec<&ModelEval> = report.versions.iter().map(|v| &v.eval).collect();
    write_evals(out, &evals)
}

/// Human-readable summary of a run report.
pub fn summary(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed {}  config {}  target {}", report.seed, &report.config_hash[..12], report.target);
    let _ = writeln!(s, "{:<8}{:>6}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}", "model", "stage", "mtpr", "near", "far", "fpr_dry", "fpr_wet", "map50");
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for v in &report.versions {
        let p = &v.eval.pooled;
        let _ = writeln!(
            s,
            "{:<8}{:>6}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}",
            format!("v{}", v.version.id),
            v.stage,
            f(p.mtpr),
            f(p.mtpr_near),
            f(p.mtpr_far),
            f(p.fpr_dry),
            f(p.fpr_wet),
            f(v.version.metrics.map50)
        );
    }
    for it in &report.iterations {
        let p = &it.pseudo_labels;
        let _ = writeln!(
            s,
            "iteration {}: days {}-{} deployed v{} observed {} detections {} uploaded {} ({} bytes, {} windows) labels {}/{} boxes correct, events tp {} fp {} fn {}",
            it.iteration,
            it.days[0],
            it.days[1],
            it.deployed_version,
            it.frames_observed,
            it.detection_frames,
            it.frames_uploaded,
            it.upload_bytes,
            it.budget_windows,
            p.correct_boxes,
            p.boxes,
            it.events.tp,
            it.events.fp,
            it.events.fn_
        );
    }
    let t = &report.totals;
    let _ = writeln!(
        s,
        "total: observed {} uploaded {} (cap {}), events tp {} fp {} fn {}",
        t.frames_observed, t.frames_uploaded, t.upload_cap, t.events.tp, t.events.fp, t.events.fn_
    );
    s
}

/// Rejects a metrics CSV whose header is not the expected one.
pub fn check_metrics_header(text: &str) -> Result<()> {
    match text.lines().next() {
        Some(METRICS_HEADER) => Ok(()),
        other => bail!("unexpected metrics header {other:?}"),
    }
}
