//! Static SVG line charts from record CSVs.
//!
//! Files named `<name>_seed<k>.csv` are grouped by `<name>`; each group gets
//! one chart per metric against rounds and against cumulative bits, drawing
//! the across-seed mean with a min/max band. When a directory holds more
//! than one group, overlay charts compare the group means.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{write_atomic, RunnerError};
use crate::engine::{RoundRecord, CSV_HEADER};

/// CSV files in an output directory that are not record streams.
const AUXILIARY: [&str; 3] = ["summary.csv", "loss_vs_round.csv", "loss_vs_bits.csv"];

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    FAvg,
    GradNormSq,
    Consensus,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::FAvg, Metric::GradNormSq, Metric::Consensus];

    pub fn name(self) -> &'static str {
        match self {
            Metric::FAvg => "f_avg",
            Metric::GradNormSq => "grad_norm_sq",
            Metric::Consensus => "consensus",
        }
    }

    pub fn of(self, r: &RoundRecord) -> f64 {
        match self {
            Metric::FAvg => r.f_avg,
            Metric::GradNormSq => r.grad_norm_sq,
            Metric::Consensus => r.consensus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Round,
    Bits,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Round => "round",
            Axis::Bits => "bits",
        }
    }

    fn of(self, r: &RoundRecord) -> f64 {
        match self {
            Axis::Round => r.t as f64,
            Axis::Bits => r.bits_total as f64,
        }
    }
}

/// Mean and extremes across series at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandPoint {
    pub x: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Pointwise band over series aligned by index. Positions past the end of
/// a shorter series (an aborted run) use the series that reach them.
pub fn band(series: &[Vec<(f64, f64)>]) -> Vec<BandPoint> {
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let pts: Vec<(f64, f64)> = series.iter().filter_map(|s| s.get(i).copied()).collect();
            let n = pts.len() as f64;
            BandPoint {
                x: pts.iter().map(|p| p.0).sum::<f64>() / n,
                mean: pts.iter().map(|p| p.1).sum::<f64>() / n,
                min: pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
                max: pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Reads a record CSV, rejecting any other schema.
pub fn load_records(path: &Path) -> Result<Vec<RoundRecord>, RunnerError> {
    let text = fs::read_to_string(path).map_err(|e| RunnerError::Io { path: path.to_path_buf(), source: e })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(RunnerError::Schema(format!(
                "{}: expected header {CSV_HEADER:?}, found {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| RoundRecord::parse_csv_row(l).map_err(|e| RunnerError::Schema(format!("{}:{}: {e}", path.display(), i + 2))))
        .collect()
}

/// Group name of a `<name>_seed<k>.csv` file.
pub fn group_of(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    match stem.rfind("_seed") {
        Some(i) if stem[i + 5..].chars().all(|c| c.is_ascii_digit()) && i + 5 < stem.len() => stem[..i].to_string(),
        _ => stem.to_string(),
    }
}

/// Renders every record CSV in `dir`; returns the written chart paths.
pub fn render_dir(dir: &Path) -> Result<Vec<PathBuf>, RunnerError> {
    let entries = fs::read_dir(dir).map_err(|e| RunnerError::Io { path: dir.to_path_buf(), source: e })?;
    let mut csvs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| AUXILIARY.contains(&n)))
        .collect();
    csvs.sort();
    let mut groups: BTreeMap<String, Vec<Vec<RoundRecord>>> = BTreeMap::new();
    for p in &csvs {
        groups.entry(group_of(p)).or_default().push(load_records(p)?);
    }
    let mut written = Vec::new();
    for (name, runs) in &groups {
        for metric in Metric::ALL {
            for axis in [Axis::Round, Axis::Bits] {
                let b = band(&series(runs, metric, axis));
                let svg = chart(&format!("{name}: {}", metric.name()), axis.name(), metric.name(), &[(name.as_str(), b)]);
                let path = dir.join(format!("{name}_{}_vs_{}.svg", metric.name(), axis.name()));
                write_atomic(&path, svg.as_bytes())?;
                written.push(path);
            }
        }
    }
    if groups.len() > 1 {
        for metric in Metric::ALL {
            for axis in [Axis::Round, Axis::Bits] {
                let bands: Vec<(&str, Vec<BandPoint>)> =
                    groups.iter().map(|(n, runs)| (n.as_str(), band(&series(runs, metric, axis)))).collect();
                let svg = chart(&format!("all runs: {}", metric.name()), axis.name(), metric.name(), &bands);
                let path = dir.join(format!("all_{}_vs_{}.svg", metric.name(), axis.name()));
                write_atomic(&path, svg.as_bytes())?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn series(runs: &[Vec<RoundRecord>], metric: Metric, axis: Axis) -> Vec<Vec<(f64, f64)>> {
    runs.iter().map(|rs| rs.iter().map(|r| (axis.of(r), metric.of(r))).collect()).collect()
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A standalone SVG line chart of one or more bands. The y axis is
/// logarithmic when every value is positive and spans over two decades.
pub fn chart(title: &str, x_label: &str, y_label: &str, bands: &[(&str, Vec<BandPoint>)]) -> String {
    let finite = |v: f64| v.is_finite();
    let xs: Vec<f64> = bands.iter().flat_map(|(_, b)| b.iter().map(|p| p.x)).filter(|v| finite(*v)).collect();
    let ys: Vec<f64> =
        bands.iter().flat_map(|(_, b)| b.iter().flat_map(|p| [p.min, p.max, p.mean])).filter(|v| finite(*v)).collect();
    let (mut x0, mut x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (y_lo, y_hi) = (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let log_y = y_lo > 0.0 && y_hi / y_lo > 100.0;
    let tf = |v: f64| if log_y { v.log10() } else { v };
    let (mut y0, mut y1) = if y_lo.is_finite() { (tf(y_lo), tf(y_hi)) } else { (0.0, 1.0) };
    if y1 <= y0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.1 };
        y0 -= pad;
        y1 += pad;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (tf(y) - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let gx = LEFT + f * pw;
        let _ = writeln!(s, r##"<line x1="{gx:.2}" y1="{TOP}" x2="{gx:.2}" y2="{}" stroke="#ddd"/>"##, TOP + ph);
        let _ = writeln!(s, r#"<text x="{gx:.2}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, fmt_num(xv));
        let yt = y0 + f * (y1 - y0);
        let yv = if log_y { 10f64.powf(yt) } else { yt };
        let gy = TOP + ph - f * ph;
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{gy:.2}" x2="{}" y2="{gy:.2}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, gy + 4.0, fmt_num(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 18.0, escape(x_label));
    let scale = if log_y { " (log)" } else { "" };
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}{scale}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (k, (label, pts)) in bands.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let ok: Vec<&BandPoint> = pts.iter().filter(|p| finite(p.x) && finite(p.min) && finite(p.max) && finite(p.mean)).collect();
        if ok.len() > 1 && ok.iter().any(|p| p.max > p.min) {
            let mut poly = String::new();
            for p in &ok {
                let _ = write!(poly, "{:.2},{:.2} ", px(p.x), py(p.max));
            }
            for p in ok.iter().rev() {
                let _ = write!(poly, "{:.2},{:.2} ", px(p.x), py(p.min));
            }
            let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, poly.trim_end());
        }
        if ok.len() == 1 {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(ok[0].x), py(ok[0].mean));
        } else if !ok.is_empty() {
            let line: Vec<String> = ok.iter().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.mean))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, line.join(" "));
        }
        let ly = TOP + 14.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(label));
    }
    // plotted values, exact, for anyone re-reading the chart
    s.push_str("<metadata>\nseries,x,mean,min,max\n");
    for (label, pts) in bands {
        for p in pts {
            let _ = writeln!(s, "{},{},{},{},{}", escape(label), p.x, p.mean, p.min, p.max);
        }
    }
    s.push_str("</metadata>\n</svg>\n");
    s
}

/// Reads back the `<metadata>` table written by [`chart`]: one
/// `(series, point)` pair per plotted position.
pub fn chart_data(svg: &str) -> Result<Vec<(String, BandPoint)>, RunnerError> {
    let start = svg.find("<metadata>").ok_or_else(|| RunnerError::Schema("chart has no data block".into()))?;
    let end = svg[start..].find("</metadata>").ok_or_else(|| RunnerError::Schema("unterminated data block".into()))? + start;
    let bad = |l: &str| RunnerError::Schema(format!("bad chart data line {l:?}"));
    svg[start + "<metadata>".len()..end]
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && *l != "series,x,mean,min,max")
        .map(|l| {
            let f: Vec<&str> = l.rsplitn(5, ',').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(l));
            Ok((f[4].to_string(), BandPoint { x: num(f[3])?, mean: num(f[2])?, min: num(f[1])?, max: num(f[0])? }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_recomputes_mean_and_extremes() {
        let a = vec![(0.0, 1.0), (1.0, 4.0)];
        let b = vec![(0.0, 3.0), (1.0, 2.0)];
        let c = vec![(0.0, 2.0)];
        let out = band(&[a, b, c]);
        assert_eq!(out[0], BandPoint { x: 0.0, mean: 2.0, min: 1.0, max: 3.0 });
        assert_eq!(out[1], BandPoint { x: 1.0, mean: 3.0, min: 2.0, max: 4.0 });
    }

    #[test]
    fn group_names() {
        assert_eq!(group_of(Path::new("x/ring8_seed12.csv")), "ring8");
        assert_eq!(group_of(Path::new("a_seedless.csv")), "a_seedless");
        assert_eq!(group_of(Path::new("plain.csv")), "plain");
    }

    #[test]
    fn single_point_chart() {
        let svg = chart("t", "round", "f", &[("a", vec![BandPoint { x: 0.0, mean: 1.0, min: 1.0, max: 1.0 }])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN"));
        let data = chart_data(&svg).unwrap();
        assert_eq!(data, vec![("a".to_string(), BandPoint { x: 0.0, mean: 1.0, min: 1.0, max: 1.0 })]);
    }
}
