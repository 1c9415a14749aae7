//! Result files.
//!
//! * `metrics.csv`: `task,model,modalities,train_size,seed,auc,n_pos,n_neg,test_hash`,
//!   one row per report.
//! * `summary.csv`: `task,model,modalities,train_size,n_seeds,mean_auc,std_auc,aucs`.
//! * `roc_<id>.csv` (`fpr,tpr`) and `roc_<id>.svg` per report.
//! * `sweep_<task>.svg` when a task has reports at two or more train sizes.
//! * `manifest.json`: every entry, the caller's context, and file digests.
//!
//! Rows are ordered by descriptor, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::experiment::mean_auc;
use super::roc::RocReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub roc_csv: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
    pub manifest: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
    w.write_record(fields).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

pub fn metrics_csv(reports: &[&RocReport]) -> String {
    let mut out = String::from("task,model,modalities,train_size,seed,auc,n_pos,n_neg,test_hash\n");
    for r in reports {
        let d = &r.descriptor;
        out += &csv_line(&[
            d.task.to_string(),
            d.model.clone(),
            d.modalities.to_string(),
            d.train_size.to_string(),
            d.seed.to_string(),
            format!("{:.6}", r.auc),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
            r.test_hash.clone(),
        ]);
    }
    out
}

/// Mean AUC per descriptor without the seed, over reports already sorted
/// by descriptor (so per-seed values are in seed order).
fn grouped(sorted: &[&RocReport]) -> Vec<(super::roc::Descriptor, f64, Vec<f64>)> {
    let owned: Vec<RocReport> = sorted.iter().map(|r| (*r).clone()).collect();
    mean_auc(&owned)
}

fn summary_csv(sorted: &[&RocReport]) -> String {
    let mut out = String::from("task,model,modalities,train_size,n_seeds,mean_auc,std_auc,aucs\n");
    for (d, mean, v) in grouped(sorted) {
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
        out += &csv_line(&[
            d.task.to_string(),
            d.model,
            d.modalities.to_string(),
            d.train_size.to_string(),
            v.len().to_string(),
            format!("{mean:.6}"),
            format!("{:.6}", var.sqrt()),
            v.iter().map(|a| format!("{a:.6}")).collect::<Vec<_>>().join(" "),
        ]);
    }
    out
}

pub fn roc_csv(report: &RocReport) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (x, y) in &report.points {
        let _ = writeln!(out, "{x:.6},{y:.6}");
    }
    out
}

const W: f64 = 480.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 30.0;
const PLOT: f64 = 320.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Axes frame with ticks; `x` and `y` are `(min, max, label)`.
fn frame(title: &str, x: (f64, f64, &str), y: (f64, f64, &str)) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, LEFT + PLOT / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{PLOT}" height="{PLOT}" fill="none" stroke="black"/>"#
    );
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let px = LEFT + f * PLOT;
        let py = TOP + PLOT - f * PLOT;
        let _ = writeln!(
            s,
            r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + PLOT,
            TOP + PLOT + 4.0,
            TOP + PLOT + 16.0,
            tick(x.0 + f * (x.1 - x.0))
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{py:.1}" x2="{LEFT}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            py + 4.0,
            tick(y.0 + f * (y.1 - y.0))
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + PLOT / 2.0,
        TOP + PLOT + 32.0,
        escape(x.2)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + PLOT / 2.0,
        TOP + PLOT / 2.0,
        escape(y.2)
    );
    s
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() >= 1.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn polyline(points: &[(f64, f64)], x: (f64, f64), y: (f64, f64), color: &str, dashed: bool) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|&(a, b)| {
            let px = LEFT + (a - x.0) / (x.1 - x.0) * PLOT;
            let py = TOP + PLOT - (b - y.0) / (y.1 - y.0) * PLOT;
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>\n",
        pts.join(" ")
    )
}

fn legend(entries: &[(String, &str)]) -> String {
    let mut s = String::new();
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = TOP + 10.0 + 16.0 * i as f64;
        let x = LEFT + PLOT + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            x + 14.0,
            x + 18.0,
            y + 4.0,
            escape(label)
        );
    }
    s
}

pub fn roc_svg(report: &RocReport) -> String {
    let d = &report.descriptor;
    let mut s = frame(
        &format!("ROC {} {} ({})", d.task, d.model, d.modalities),
        (0.0, 1.0, "false positive rate"),
        (0.0, 1.0, "true positive rate"),
    );
    s += &polyline(&[(0.0, 0.0), (1.0, 1.0)], (0.0, 1.0), (0.0, 1.0), "#999999", true);
    s += &polyline(&report.points, (0.0, 1.0), (0.0, 1.0), COLORS[0], false);
    s += &legend(&[(format!("AUC {:.3}", report.auc), COLORS[0])]);
    s += "</svg>\n";
    s
}

/// Mean AUC against train size, one line per model and modality subset.
fn sweep_svg(task: &str, lines: &BTreeMap<String, Vec<(f64, f64)>>) -> String {
    let xs = lines.values().flatten().map(|p| p.0);
    let (xmin, xmax) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let xmax = if xmax > xmin { xmax } else { xmin + 1.0 };
    let mut s = frame(&format!("AUC by training size ({task})"), (xmin, xmax, "labeled training patients"), (0.4, 1.0, "mean test AUC"));
    let mut entries = Vec::new();
    for (i, (name, pts)) in lines.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        s += &polyline(pts, (xmin, xmax), (0.4, 1.0), color, false);
        entries.push((name.clone(), color));
    }
    s += &legend(&entries);
    s += "</svg>\n";
    s
}

/// Writes every report file into `out_dir` and returns their paths.
/// `context` is stored verbatim in the manifest (e.g. the run config).
pub fn write_report(reports: &[RocReport], out_dir: &Path, context: serde_json::Value) -> Result<ReportFiles> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sorted: Vec<&RocReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.descriptor.cmp(&b.descriptor));

    let metrics = out_dir.join("metrics.csv");
    write(&metrics, &metrics_csv(&sorted))?;
    let summary = out_dir.join("summary.csv");
    write(&summary, &summary_csv(&sorted))?;

    let mut roc_files = Vec::new();
    let mut plots = Vec::new();
    let mut entries = Vec::new();
    let mut digests = BTreeMap::new();
    for r in &sorted {
        let id = r.descriptor.id();
        let csv_path = out_dir.join(format!("roc_{id}.csv"));
        let csv_text = roc_csv(r);
        write(&csv_path, &csv_text)?;
        let svg_path = out_dir.join(format!("roc_{id}.svg"));
        write(&svg_path, &roc_svg(r))?;
        digests.insert(format!("roc_{id}.csv"), sha256_hex(csv_text.as_bytes()));
        entries.push(serde_json::json!({
            "id": id,
            "descriptor": r.descriptor,
            "auc": r.auc,
            "n_pos": r.n_pos,
            "n_neg": r.n_neg,
            "test_hash": r.test_hash,
        }));
        roc_files.push(csv_path);
        plots.push(svg_path);
    }

    let mut by_task: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for (d, mean, _) in grouped(&sorted) {
        by_task
            .entry(d.task.to_string())
            .or_default()
            .entry(format!("{} {}", d.model, d.modalities))
            .or_default()
            .push((d.train_size as f64, mean));
    }
    for (task, lines) in &by_task {
        if lines.values().any(|pts| pts.len() >= 2) {
            let path = out_dir.join(format!("sweep_{task}.svg"));
            write(&path, &sweep_svg(task, lines))?;
            plots.push(path);
        }
    }

    let metrics_text = fs::read(&metrics).map_err(|e| Error::io(&metrics, e))?;
    digests.insert("metrics.csv".into(), sha256_hex(&metrics_text));
    let test_hashes: std::collections::BTreeSet<&str> = sorted.iter().map(|r| r.test_hash.as_str()).collect();
    let manifest_doc = serde_json::json!({
        "entries": entries,
        "test_hashes": test_hashes,
        "digests": digests,
        "context": context,
    });
    let manifest = out_dir.join("manifest.json");
    write(&manifest, &(serde_json::to_string_pretty(&manifest_doc)? + "\n"))?;
    Ok(ReportFiles {
        metrics,
        summary,
        roc_csv: roc_files,
        plots,
        manifest,
    })
}
