//! Standalone SVG charts with a tidy CSV next to each one.
//!
//! Output depends only on the inputs, so re-plotting the same files gives
//! byte-identical SVG and CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{Grid, MetricsRecord};

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One run's metrics with the label used in legends and CSV rows.
pub struct Run {
    pub label: String,
    pub records: Vec<MetricsRecord>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Polyline chart of `(x, y)` series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + ph + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            LEFT + pw,
            sy(yv),
            sy(yv)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn write_metric(dir: &Path, name: &str, title: &str, runs: &[Run], pick: fn(&MetricsRecord) -> f64) -> Result<Vec<PathBuf>> {
    let csv_path = dir.join(format!("{name}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    w.write_record(["run", "step", name]).map_err(|e| csv_error(&csv_path, e))?;
    let mut series = Vec::with_capacity(runs.len());
    for run in runs {
        let mut pts = Vec::with_capacity(run.records.len());
        for r in &run.records {
            let v = pick(r);
            w.write_record([run.label.clone(), r.step.to_string(), v.to_string()])
                .map_err(|e| csv_error(&csv_path, e))?;
            pts.push((r.step as f64, v));
        }
        series.push((run.label.clone(), pts));
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let svg_path = dir.join(format!("{name}.svg"));
    write_file(&svg_path, &line_chart(title, "step", name, &series))?;
    Ok(vec![svg_path, csv_path])
}

/// Loss and avg_skip curves, one line per run.
pub fn plot_metrics(runs: &[Run], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if runs.is_empty() || runs.iter().any(|r| r.records.is_empty()) {
        return Err(Error::EmptyInput("metrics".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = write_metric(dir, "mean_loss", "training loss", runs, |r| r.mean_loss)?;
    out.extend(write_metric(dir, "avg_skip", "average skipped tokens per step", runs, |r| r.avg_skip)?);
    Ok(out)
}

/// Heat map of QA accuracy, rows K_train and columns K_infer.
pub fn grid_svg(grid: &Grid) -> String {
    let rows = grid.k_train_values();
    let cols = grid.k_infer_values();
    let cell = 110.0;
    let (x0, y0) = (110.0, 60.0);
    let w = x0 + cell * cols.len() as f64 + 20.0;
    let h = y0 + cell * rows.len() as f64 + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="15">QA accuracy (rows K_train, columns K_infer)</text>"#, w / 2.0);
    for (j, k) in cols.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">K_infer={k}</text>"#,
            x0 + cell * (j as f64 + 0.5),
            y0 - 8.0
        );
    }
    for (i, kt) in rows.iter().enumerate() {
        let y = y0 + cell * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">K_train={kt}</text>"#, x0 - 8.0, y + cell / 2.0);
        for (j, ki) in cols.iter().enumerate() {
            let x = x0 + cell * j as f64;
            match grid.get(*kt, *ki) {
                Some(c) => {
                    let shade = (255.0 - 200.0 * c.accuracy.clamp(0.0, 1.0)).round() as u8;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="black"/>"#
                    );
                    let _ = writeln!(
                        s,
                        r#"<text x="{}" y="{}" text-anchor="middle" font-size="16">{:.3}</text>"#,
                        x + cell / 2.0,
                        y + cell / 2.0,
                        c.accuracy
                    );
                    let _ = writeln!(
                        s,
                        r#"<text x="{}" y="{}" text-anchor="middle">{:.1} windows</text>"#,
                        x + cell / 2.0,
                        y + cell / 2.0 + 20.0,
                        c.mean_windows_read
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#eeeeee" stroke="black"/>"##
                    );
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn plot_grid(grid: &Grid, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if grid.cells.is_empty() {
        return Err(Error::EmptyInput("grid".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let svg_path = dir.join("qa_grid.svg");
    write_file(&svg_path, &grid_svg(grid))?;
    let csv_path = dir.join("qa_grid.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    w.write_record(["k_train", "k_infer", "accuracy", "mean_windows_read", "mean_tokens_skipped"])
        .map_err(|e| csv_error(&csv_path, e))?;
    for c in &grid.cells {
        w.write_record([
            c.k_train.to_string(),
            c.k_infer.to_string(),
            c.accuracy.to_string(),
            c.mean_windows_read.to_string(),
            c.mean_tokens_skipped.to_string(),
        ])
        .map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(vec![svg_path, csv_path])
}
