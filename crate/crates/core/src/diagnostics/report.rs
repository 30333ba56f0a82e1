//! CSV tables and self-contained SVG charts of diagnostic results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::invariance::InvarianceRecord;
use super::locality::LocalityProfile;
use super::probe::ProbeReport;

pub const LOCALITY_CSV: &str = "locality.csv";
pub const PROBE_CSV: &str = "probe.csv";
pub const INVARIANCE_CSV: &str = "invariance.csv";
pub const LOCALITY_HEADER: [&str; 7] =
    ["run", "layer", "step", "mass_on_condition", "mass_on_neighbors", "mass_elsewhere", "mean_distance"];
pub const PROBE_HEADER: [&str; 5] = ["run", "layer", "epochs", "step", "accuracy"];
pub const INVARIANCE_HEADER: [&str; 5] = ["run", "pairs", "layer", "token_change_rate", "feature_cosine"];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Named results to render; names label CSV rows and chart series.
#[derive(Debug, Clone, Default)]
pub struct ReportInput {
    pub profiles: Vec<(String, LocalityProfile)>,
    pub probes: Vec<(String, ProbeReport)>,
    pub invariance: Vec<(String, InvarianceRecord)>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), detail: e.to_string() }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    s
}

/// Heatmap of a row-major `n × n` matrix, white (0) to dark blue (max).
pub fn heatmap_svg(title: &str, values: &[f64], n: usize) -> String {
    let mut s = svg_open(title);
    let side = (HEIGHT - 2.0 * MARGIN).min(WIDTH - 2.0 * MARGIN);
    let cell = side / n.max(1) as f64;
    let x0 = (WIDTH - side) / 2.0;
    let max = values.iter().copied().fold(0.0f64, f64::max);
    for r in 0..n {
        for c in 0..n {
            let v = if max > 0.0 { values[r * n + c] / max } else { 0.0 };
            let shade = |full: f64| (255.0 - v * (255.0 - full)).round() as u8;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#{:02x}{:02x}{:02x}"/>"##,
                x0 + c as f64 * cell,
                MARGIN + r as f64 * cell,
                cell,
                cell,
                shade(8.0),
                shade(48.0),
                shade(107.0)
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">key</text>"#, WIDTH / 2.0, HEIGHT - 16.0);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">query step</text>"#,
        x0 - 12.0,
        HEIGHT / 2.0,
        x0 - 12.0,
        HEIGHT / 2.0
    );
    s.push_str("</svg>\n");
    s
}

/// Line chart; each series is `(name, [(x, y)])`.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = svg_open(title);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !x_min.is_finite() {
        (x_min, x_max, y_max) = (0.0, 1.0, 1.0);
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let px = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * pw;
    let py = |y: f64| HEIGHT - MARGIN - (y - y_min) / (y_max - y_min) * ph;
    let _ = writeln!(
        s,
        r#"<path d="M{:.2} {:.2} L{:.2} {:.2} L{:.2} {:.2}" fill="none" stroke="black"/>"#,
        MARGIN,
        MARGIN,
        MARGIN,
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN
    );
    for (v, anchor) in [(y_min, "end"), (y_max, "end")] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}">{v:.3}</text>"#, MARGIN - 4.0, py(v) + 4.0);
    }
    for v in [x_min, x_max] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v}</text>"#, px(v), HEIGHT - MARGIN + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !p.is_empty() {
            let mut d = String::new();
            for (k, &(x, y)) in p.iter().enumerate() {
                let _ = write!(d, "{}{:.2} {:.2}", if k == 0 { "M" } else { " L" }, px(x), py(y));
            }
            let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#);
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#, WIDTH - MARGIN - 120.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the three CSV tables (headers only when empty), one attention
/// heatmap per profile and layer, and summary line charts. Returns every
/// path written, in order.
pub fn render_report(input: &ReportInput, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let mut rows = Vec::new();
    for (name, p) in &input.profiles {
        for (l, layer) in p.cells.iter().enumerate() {
            for (t, c) in layer.iter().enumerate() {
                rows.push(vec![
                    name.clone(),
                    (l + 1).to_string(),
                    t.to_string(),
                    c.mass_on_condition.to_string(),
                    c.mass_on_neighbors.to_string(),
                    c.mass_elsewhere.to_string(),
                    c.mean_distance.to_string(),
                ]);
            }
        }
    }
    let path = out_dir.join(LOCALITY_CSV);
    write_csv(&path, &LOCALITY_HEADER, &rows)?;
    written.push(path);

    let mut rows = Vec::new();
    for (name, r) in &input.probes {
        for (s, a) in r.steps.iter().zip(&r.accuracy) {
            rows.push(vec![name.clone(), r.layer.to_string(), r.epochs.to_string(), s.to_string(), a.to_string()]);
        }
    }
    let path = out_dir.join(PROBE_CSV);
    write_csv(&path, &PROBE_HEADER, &rows)?;
    written.push(path);

    let rows: Vec<Vec<String>> = input
        .invariance
        .iter()
        .map(|(name, r)| {
            vec![
                name.clone(),
                r.pairs.to_string(),
                r.layer.to_string(),
                r.token_change_rate.to_string(),
                r.feature_cosine.map(|f| f.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    let path = out_dir.join(INVARIANCE_CSV);
    write_csv(&path, &INVARIANCE_HEADER, &rows)?;
    written.push(path);

    let mut save = |file: String, body: String| -> Result<()> {
        let path = out_dir.join(file);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for (name, p) in &input.profiles {
        let t = p.grid_side * p.grid_side;
        for (l, m) in p.mean_attention.iter().enumerate() {
            let title = format!("{name}: mean attention, layer {}", l + 1);
            save(format!("attention_{}_layer{}.svg", file_stem(name), l + 1), heatmap_svg(&title, m, t))?;
        }
    }
    if !input.profiles.is_empty() {
        let series: Vec<_> = input
            .profiles
            .iter()
            .map(|(n, p)| (n.clone(), (1..=p.layers()).map(|l| (l as f64, p.summary(l).mass_elsewhere)).collect()))
            .collect();
        save("locality.svg".into(), line_chart_svg("Attention mass outside neighbors", "layer", "mass_elsewhere", &series))?;
    }
    if !input.probes.is_empty() {
        let series: Vec<_> = input
            .probes
            .iter()
            .map(|(n, r)| (n.clone(), r.steps.iter().zip(&r.accuracy).map(|(&s, &a)| (s as f64, a)).collect()))
            .collect();
        save("probe.svg".into(), line_chart_svg("Linear probe accuracy per step", "step", "top-1 accuracy", &series))?;
    }
    Ok(written)
}
