//! Deterministic SVG charts and summary tables over completed runs.
//!
//! Identical inputs produce byte-identical files: series are iterated in
//! sorted order, floats are printed with fixed precision, and nothing
//! time- or environment-dependent is written.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::path::Path;

use muwarm_core::error::Result;
use muwarm_core::metrics::{gaussian_smooth, CoordCheckResult, SmoothedSeries};
use muwarm_core::train::MetricsRecord;

use crate::experiments::read_metrics;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

const W: f64 = 720.0;
const H: f64 = 440.0;
const ML: f64 = 70.0; // left margin
const MR: f64 = 180.0; // room for the legend
const MT: f64 = 36.0;
const MB: f64 = 50.0;

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 10_000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// One labeled line of (x, y) points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Render labeled series into a line chart.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let finite = |v: f64| v.is_finite();
    let xs = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .filter(|&v| finite(v));
    let ys = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|&v| finite(v));
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in xs {
        x0 = x0.min(v);
        x1 = x1.max(v);
    }
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in ys {
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
    }
    if !y0.is_finite() {
        y0 = 0.0;
        y1 = 1.0;
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |v: f64| ML + (v - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |v: f64| H - MB - (v - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        ML + (W - ML - MR) / 2.0,
        title
    );
    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - MB,
        W - MR,
        H - MB
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>",
        H - MB
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            fmt(sx(fx)),
            H - MB + 16.0,
            fmt_tick(fx)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\"/>",
            fmt(sx(fx)),
            MT,
            fmt(sx(fx)),
            H - MB
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            ML - 6.0,
            fmt(sy(fy) + 4.0),
            fmt_tick(fy)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\"/>",
            fmt(sy(fy)),
            W - MR,
            fmt(sy(fy))
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        ML + (W - ML - MR) / 2.0,
        H - 12.0,
        xlabel
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0,
        ylabel
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{},{}", fmt(sx(p.0)), fmt(sy(p.1))))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
                color,
                pts.join(" ")
            );
        }
        let ly = MT + 14.0 * i as f64 + 6.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/>",
            W - MR + 8.0,
            ly,
            W - MR + 28.0,
            ly,
            color
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\">{}</text>",
            W - MR + 32.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Summary row per run for the report table.
#[derive(Debug, serde::Serialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub scheme: String,
    pub width: usize,
    pub lambda_shrink: Option<f64>,
    pub lr: f64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub final_smoothed_val_loss: f64,
    pub tokens: u64,
    pub flops: u64,
}

/// Scan `out/runs`, emit loss-vs-tokens and loss-vs-FLOPs charts plus a
/// summary table; returns the number of runs found. Missing or empty metric
/// files are listed as absent but do not fail the report.
pub fn emit(out_dir: &Path) -> Result<usize> {
    let runs_dir = out_dir.join("runs");
    let report_dir = out_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let mut all: BTreeMap<String, Vec<MetricsRecord>> = BTreeMap::new();
    let mut absent: Vec<String> = Vec::new();
    if runs_dir.exists() {
        let mut paths: Vec<_> = std::fs::read_dir(&runs_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".metrics.jsonl"))
            .collect();
        paths.sort();
        for p in paths {
            match read_metrics(&p) {
                Ok(m) if !m.is_empty() => {
                    all.insert(m[0].run_id.clone(), m);
                }
                _ => absent.push(p.display().to_string()),
            }
        }
    }

    let label = |m: &MetricsRecord| -> String {
        match m.lambda_shrink {
            Some(l) => format!("{} w{} λ={} [{}]", m.scheme, m.width, l, &m.run_id[..6.min(m.run_id.len())]),
            None => format!("{} w{} [{}]", m.scheme, m.width, &m.run_id[..6.min(m.run_id.len())]),
        }
    };

    let mut tok_series = Vec::new();
    let mut flop_series = Vec::new();
    let mut rows = Vec::new();
    for records in all.values() {
        let vals: Vec<f64> = records.iter().map(|m| m.val_loss).collect();
        let smoothed = gaussian_smooth(&vals, SmoothedSeries::default_sigma(vals.len()));
        tok_series.push(Series {
            label: label(&records[0]),
            points: records
                .iter()
                .zip(&smoothed)
                .map(|(m, &v)| (m.tokens as f64, v))
                .collect(),
        });
        flop_series.push(Series {
            label: label(&records[0]),
            points: records
                .iter()
                .zip(&smoothed)
                .map(|(m, &v)| (m.flops as f64, v))
                .collect(),
        });
        let last = records.last().unwrap();
        rows.push(SummaryRow {
            run_id: last.run_id.clone(),
            scheme: last.scheme.clone(),
            width: last.width,
            lambda_shrink: last.lambda_shrink,
            lr: last.lr,
            initial_val_loss: vals[0],
            final_val_loss: *vals.last().unwrap(),
            final_smoothed_val_loss: *smoothed.last().unwrap(),
            tokens: last.tokens,
            flops: last.flops,
        });
    }

    std::fs::write(
        report_dir.join("loss_vs_tokens.svg"),
        line_chart("validation loss vs tokens", "tokens", "val loss (smoothed)", &tok_series),
    )?;
    std::fs::write(
        report_dir.join("loss_vs_flops.svg"),
        line_chart("validation loss vs FLOPs", "FLOPs (6ND)", "val loss (smoothed)", &flop_series),
    )?;

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<18} {:>5} {:>6} {:>8} {:>10} {:>9} {:>9} {:>12} {:>14}",
        "run_id", "sch", "width", "lambda", "lr", "init", "final", "tokens", "flops"
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<18} {:>5} {:>6} {:>8} {:>10} {:>9.4} {:>9.4} {:>12} {:>14}",
            r.run_id,
            r.scheme,
            r.width,
            r.lambda_shrink.map(|l| l.to_string()).unwrap_or_else(|| "-".into()),
            r.lr,
            r.initial_val_loss,
            r.final_val_loss,
            r.tokens,
            r.flops
        );
    }
    if !absent.is_empty() {
        let _ = writeln!(table, "\nabsent or unreadable:");
        for a in &absent {
            let _ = writeln!(table, "  {a}");
        }
    }
    std::fs::write(report_dir.join("summary.txt"), &table)?;
    let json = serde_json::to_string_pretty(&rows)?;
    std::fs::write(report_dir.join("summary.json"), json)?;
    Ok(rows.len())
}

/// Log-log activation-norm panels (one chart per coordinate-check variant,
/// one line per layer per step).
pub fn coordcheck_svg(report_dir: &Path, results: &BTreeMap<String, CoordCheckResult>) -> Result<()> {
    std::fs::create_dir_all(report_dir)?;
    for (name, res) in results {
        let mut series = Vec::new();
        for (layer, grid) in &res.norms {
            for (step, row) in grid.iter().enumerate() {
                if step == 0 {
                    continue;
                }
                let points: Vec<(f64, f64)> = res
                    .widths
                    .iter()
                    .zip(row)
                    .filter(|(_, &v)| v.is_finite() && v > 0.0)
                    .map(|(&w, &v)| ((w as f64).ln(), v.ln()))
                    .collect();
                series.push(Series {
                    label: format!("{layer} t={step}"),
                    points,
                });
            }
        }
        std::fs::write(
            report_dir.join(format!("coordcheck_{}.svg", name.replace(['.', ' '], "_"))),
            line_chart(
                &format!("coordinate check: {name}"),
                "ln width",
                "ln mean |activation|",
                &series,
            ),
        )?;
    }
    Ok(())
}
