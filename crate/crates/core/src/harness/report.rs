use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{read_metrics_csv, MetricRow};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "run,fold,best_epoch,epochs,val_loss,val_top1,train_loss";

/// Best-validation-loss epoch of one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSummary {
    pub run: String,
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs: usize,
    pub val_loss: f64,
    pub val_top1: f64,
    pub train_loss: f64,
}

fn value(rows: &[MetricRow], fold: usize, epoch: usize, split: &str, metric: &str) -> f64 {
    rows.iter()
        .find(|r| r.fold == fold && r.epoch == epoch && r.split == split && r.metric == metric)
        .map_or(f64::NAN, |r| r.value)
}

pub fn summarize(run: &str, rows: &[MetricRow]) -> Vec<FoldSummary> {
    let mut folds: BTreeMap<usize, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == "val" && r.metric == "loss") {
        folds.entry(r.fold).or_default().push(r);
    }
    folds
        .into_iter()
        .map(|(fold, v)| {
            // Earliest epoch wins ties, matching the trainer's strict improvement rule.
            let best = v
                .iter()
                .fold(v[0], |b, r| if r.value < b.value { r } else { b });
            FoldSummary {
                run: run.to_string(),
                fold,
                best_epoch: best.epoch,
                epochs: v.iter().map(|r| r.epoch).max().unwrap_or(0),
                val_loss: best.value,
                val_top1: value(rows, fold, best.epoch, "val", "top1"),
                train_loss: value(rows, fold, best.epoch, "train", "loss"),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[FoldSummary]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.run, r.fold, r.best_epoch, r.epochs, r.val_loss, r.val_top1, r.train_loss
        );
    }
    s
}

/// One polyline of a chart.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal standalone SVG line chart.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (64.0, 150.0, 36.0, 48.0);
    let finite = series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 16.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 36.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Per-epoch series of `metric` for every fold and split.
pub fn metric_series(rows: &[MetricRow], metric: &str) -> Vec<Series> {
    let mut by: BTreeMap<(usize, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        by.entry((r.fold, r.split.clone()))
            .or_default()
            .push((r.epoch as f64, r.value));
    }
    by.into_iter()
        .map(|((fold, split), mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label: format!("fold {fold} {split}"),
                points,
            }
        })
        .collect()
}

/// Files written by [`build_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Run directories under `runs`: `runs` itself when it holds a metrics file,
/// plus every immediate subdirectory that does.
fn run_dirs(runs: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    if runs.join(METRICS_FILE).is_file() {
        dirs.push(runs.to_path_buf());
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(runs)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.join(METRICS_FILE).is_file())
        .collect();
    subs.sort();
    dirs.extend(subs);
    if dirs.is_empty() {
        return Err(Error::Config(format!("no {METRICS_FILE} under {}", runs.display())));
    }
    Ok(dirs)
}

/// Writes `summary.csv` to `runs` and `loss.svg` / `top1.svg` into each run
/// directory.
pub fn build_report(runs: &Path) -> Result<ReportFiles> {
    let mut summary = Vec::new();
    let mut plots = Vec::new();
    for dir in run_dirs(runs)? {
        let name = dir.file_name().map_or_else(|| ".".into(), |n| n.to_string_lossy().into_owned());
        let rows = read_metrics_csv(&dir.join(METRICS_FILE))?;
        summary.extend(summarize(&name, &rows));
        for (metric, label) in [("loss", "loss"), ("top1", "Top-1")] {
            let path = dir.join(format!("{metric}.svg"));
            std::fs::write(
                &path,
                line_chart_svg(&format!("{name}: {label}"), "epoch", label, &metric_series(&rows, metric)),
            )?;
            plots.push(path);
        }
    }
    let path = runs.join(SUMMARY_FILE);
    std::fs::write(&path, summary_csv(&summary))?;
    Ok(ReportFiles { summary: path, plots })
}
