//! Run directories: `summary.json`, `curves/*.csv`, `plots/*.svg`, `torus.json`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::scenario::{Curve, RunOutput, Summary};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
}

type Result<T> = std::result::Result<T, ReportError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.display().to_string(), source }
}

/// Pretty JSON with a trailing newline; byte-identical for identical runs.
pub fn summary_json(summary: &Summary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir.join("curves")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("plots")).map_err(io_err(dir))?;
    let path = dir.join("summary.json");
    fs::write(&path, summary_json(&out.summary)).map_err(io_err(&path))?;
    for c in &out.curves {
        write_curve(&dir.join("curves").join(format!("{}.csv", c.name)), c)?;
        let path = dir.join("plots").join(format!("{}.svg", c.name));
        fs::write(&path, render_svg(c)).map_err(io_err(&path))?;
    }
    if let Some(y) = &out.torus {
        let path = dir.join("torus.json");
        let text = serde_json::to_string(y).map_err(|source| ReportError::Json { path: path.display().to_string(), source })?;
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

fn write_curve(path: &Path, c: &Curve) -> Result<()> {
    let wrap = |source| ReportError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(&c.columns).map_err(wrap)?;
    for row in &c.rows {
        w.write_record(row.iter().map(|x| format!("{x:e}"))).map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json { path: path.display().to_string(), source })
}

pub fn read_curve(path: &Path) -> Result<Curve> {
    let wrap = |source| ReportError::Csv { path: path.display().to_string(), source };
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    let columns: Vec<String> = r.headers().map_err(wrap)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(wrap)?;
        let row = rec
            .iter()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| ReportError::Malformed { path: path.display().to_string(), message: e.to_string() })?;
        rows.push(row);
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve").to_string();
    // curves of non-negative data spanning decades go on a log axis
    let positive: Vec<f64> = rows.iter().flat_map(|r| r.iter().skip(1).copied()).filter(|y| *y > 0.0).collect();
    let span = positive.iter().cloned().fold(0.0, f64::max) / positive.iter().cloned().fold(f64::INFINITY, f64::min);
    let log_y = rows.iter().all(|r| r.iter().skip(1).all(|y| *y >= 0.0)) && span > 1e3;
    Ok(Curve { name, columns, rows, log_y })
}

/// Re-renders every `curves/*.csv` of a run directory into `plots/`; returns the plot count.
pub fn rerender(dir: &Path) -> Result<usize> {
    let curves = dir.join("curves");
    let mut paths: Vec<_> = fs::read_dir(&curves)
        .map_err(io_err(&curves))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(io_err(&plots))?;
    for p in &paths {
        let c = read_curve(p)?;
        let path = plots.join(format!("{}.svg", c.name));
        fs::write(&path, render_svg(&c)).map_err(io_err(&path))?;
    }
    Ok(paths.len())
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;

/// Line plot of every column against the first.
pub fn render_svg(c: &Curve) -> String {
    let ty = |y: f64| if c.log_y { if y > 0.0 { Some(y.log10()) } else { None } } else { Some(y) };
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); c.columns.len().saturating_sub(1)];
    for row in &c.rows {
        for (k, y) in row.iter().enumerate().skip(1) {
            if let Some(v) = ty(*y).filter(|v| v.is_finite() && row[0].is_finite()) {
                series[k - 1].push((row[0], v));
            }
        }
    }
    let pts = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
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
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(&c.name));
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * PAD, H - 2.0 * PAD);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let ylabel = if c.log_y { format!("1e{y:.1}") } else { format!("{y:.3e}") };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x:.3e}</text>"#, sx(x), H - PAD + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ylabel}</text>"#, PAD - 4.0, sy(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(c.columns.first().map_or("", |x| x)));
    for (k, pts) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if !pts.is_empty() {
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        let ly = PAD + 14.0 * (k as f64 + 1.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#, W - PAD - 4.0, escape(&c.columns[k + 1]));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let c = Curve {
            name: "decay".into(),
            columns: vec!["t".into(), "ratio".into()],
            rows: vec![vec![1.0, 0.1], vec![2.0, 1e-5], vec![3.0, 1.0 / 3.0]],
            log_y: true,
        };
        let path = dir.path().join("decay.csv");
        write_curve(&path, &c).unwrap();
        assert_eq!(read_curve(&path).unwrap(), c);
    }

    #[test]
    fn empty_and_flat_curves_still_render() {
        let c = Curve { name: "a<b".into(), columns: vec!["t".into(), "y".into()], rows: vec![vec![1.0, 2.0]], log_y: false };
        let svg = render_svg(&c);
        assert!(svg.contains("a&lt;b") && svg.ends_with("</svg>\n") && !svg.contains("NaN"));
        let empty = Curve { rows: vec![], ..c };
        assert!(!render_svg(&empty).contains("NaN"));
    }
}
