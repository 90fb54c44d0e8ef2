//! Cross-run `report.json` and SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use igdm_core::MetricRecord;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::metrics::read_metrics;

const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 260.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 40.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub epochs: usize,
    pub final_record: MetricRecord,
    pub best_pgd_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub ylabel: String,
    pub series: Vec<Series>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn load_run(dir: &Path) -> Result<Vec<MetricRecord>> {
    let path = dir.join("metrics.csv");
    if !path.is_file() {
        return Err(LabError::Input(format!("{}: no metrics.csv", dir.display())));
    }
    let records = read_metrics(&path)?;
    if records.is_empty() {
        return Err(LabError::Input(format!("{}: metrics.csv has no rows", dir.display())));
    }
    Ok(records)
}

fn series(runs: &[(String, Vec<MetricRecord>)], pick: impl Fn(&MetricRecord) -> Option<f64>) -> Vec<Series> {
    runs.iter()
        .map(|(name, recs)| Series {
            name: name.clone(),
            points: recs
                .iter()
                .filter_map(|r| pick(r).filter(|v| v.is_finite()).map(|v| (r.epoch as f64, v)))
                .collect(),
        })
        .collect()
}

/// Writes `report.json`, `remainder.svg`, `gd_gc.svg` and `robust_acc.svg`
/// into `out_dir`.
pub fn emit_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(LabError::Input("no run directories given".into()));
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        runs.push((run_name(dir), load_run(dir)?));
    }
    fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let report = Report {
        runs: runs
            .iter()
            .map(|(name, recs)| RunSummary {
                run: name.clone(),
                epochs: recs.len(),
                final_record: recs.last().expect("nonempty").clone(),
                best_pgd_acc: recs.iter().map(|r| r.pgd_acc).fold(f64::NEG_INFINITY, f64::max),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| LabError::Input(e.to_string()))? + "\n";
    write(&out_dir.join("report.json"), &json)?;

    let charts = [
        (
            "remainder.svg",
            "Remainder proportion",
            vec![Panel {
                ylabel: "remainder".into(),
                series: series(&runs, |r| r.remainder),
            }],
        ),
        (
            "gd_gc.svg",
            "Gradient alignment",
            vec![
                Panel {
                    ylabel: "GD".into(),
                    series: series(&runs, |r| r.gd),
                },
                Panel {
                    ylabel: "GC".into(),
                    series: series(&runs, |r| r.gc),
                },
            ],
        ),
        (
            "robust_acc.svg",
            "Held-out PGD accuracy",
            vec![Panel {
                ylabel: "pgd_acc".into(),
                series: series(&runs, |r| Some(r.pgd_acc)),
            }],
        ),
    ];
    for (file, title, panels) in charts {
        write(&out_dir.join(file), &line_chart(title, &panels))?;
    }
    Ok(report)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn bounds(panel: &Panel) -> Option<(f64, f64, f64, f64)> {
    let pts = panel.series.iter().flat_map(|s| s.points.iter());
    let mut b: Option<(f64, f64, f64, f64)> = None;
    for &(x, y) in pts {
        b = Some(match b {
            None => (x, x, y, y),
            Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
        });
    }
    b.map(|(x0, x1, y0, y1)| {
        let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
        (x0, x1, y0, y1)
    })
}

/// Stacked line-chart panels sharing the epoch axis. Output depends only on
/// the input values.
pub fn line_chart(title: &str, panels: &[Panel]) -> String {
    let height = TOP + panels.len() as f64 * PANEL_HEIGHT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    for (p, panel) in panels.iter().enumerate() {
        let top = TOP + p as f64 * PANEL_HEIGHT;
        let (x0, y0) = (LEFT, top + PANEL_HEIGHT - BOTTOM);
        let (pw, ph) = (WIDTH - LEFT - RIGHT, PANEL_HEIGHT - BOTTOM - 12.0);
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#,
            y0 - ph
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
            y0 - ph / 2.0,
            y0 - ph / 2.0,
            escape(&panel.ylabel)
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#, x0 + pw / 2.0, y0 + 32.0);
        let Some((bx0, bx1, by0, by1)) = bounds(panel) else {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">no data</text>"#, x0 + pw / 2.0, y0 - ph / 2.0);
            continue;
        };
        let sx = |x: f64| x0 + (x - bx0) / (bx1 - bx0) * pw;
        let sy = |y: f64| y0 - (y - by0) / (by1 - by0) * ph;
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let (xv, yv) = (bx0 + t * (bx1 - bx0), by0 + t * (by1 - by0));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), y0 + 16.0, tick(xv));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, sy(yv) + 4.0, tick(yv));
        }
        for (k, ser) in panel.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            if !ser.points.is_empty() {
                let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    pts.join(" ")
                );
            }
            let ly = y0 - ph + 14.0 + 18.0 * k as f64;
            let lx = x0 + pw + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
                ly - 4.0,
                lx + 18.0,
                ly - 4.0
            );
            let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 24.0, escape(&ser.name));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
