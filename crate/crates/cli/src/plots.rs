//! Static PNG charts rendered straight into a pixel buffer. Output depends
//! only on the report, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use thiserror::Error;

use esma_core::evaluation::{AttackReport, CellStatus, DensitySeedResult, MetricKind};
use esma_core::toy_lab::ConsistencyReport;

use crate::commands::ToyDensityReport;

/// Bumped whenever pixels for an unchanged report would change.
pub const RENDERER_VERSION: u32 = 1;

pub const KINDS: [&str; 7] = ["consistency", "grid", "transfer", "erasure", "tampering", "density_shift", "psnr"];

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("unknown plot kind `{kind}`; available kinds: {}", KINDS.join(", "))]
    UnknownKind { kind: String },
    #[error("report has no data for plot kind `{kind}`; kinds with data: {}", available.join(", "))]
    NoData { kind: String, available: Vec<String> },
    #[error("cannot write plot: {0}")]
    Image(#[from] image::ImageError),
}

/// Anything a plot can be drawn from.
pub enum PlotSource<'a> {
    Toy(&'a ToyDensityReport),
    Attack(&'a AttackReport),
}

// ---------------------------------------------------------------------------
// Font: 3x5 glyphs, one row per byte, bit 2 is the leftmost column.

fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        ',' => [0, 0, 0, 2, 4],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        '/' => [1, 1, 2, 4, 4],
        '%' => [5, 1, 2, 4, 5],
        '_' => [0, 0, 0, 0, 7],
        ':' => [0, 2, 0, 2, 0],
        '=' => [0, 7, 0, 7, 0],
        '>' => [4, 2, 1, 2, 4],
        '<' => [1, 2, 4, 2, 1],
        '(' => [1, 2, 2, 2, 1],
        ')' => [4, 2, 2, 2, 4],
        '#' => [5, 7, 5, 7, 5],
        ' ' => [0, 0, 0, 0, 0],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        _ => [7, 1, 2, 0, 2],
    }
}

const SCALE: i64 = 2;
const CHAR_W: i64 = 4 * SCALE;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([215, 215, 215]);
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([23, 190, 207]),
];

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(w, h, WHITE),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            let ox = x + i as i64 * CHAR_W;
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        let px = ox + col * SCALE;
                        let py = y + row as i64 * SCALE;
                        self.rect(px, py, px + SCALE - 1, py + SCALE - 1, c);
                    }
                }
            }
        }
    }

    fn text_right(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        self.text(x - s.chars().count() as i64 * CHAR_W, y, s, c);
    }

    fn save(&self, path: &Path) -> Result<(), PlotError> {
        self.img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

fn tick_label(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    range(values, 0.05)
}

fn range(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = pad * (hi - lo);
    (lo - pad, hi + pad)
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

/// Line chart with markers, axes, four ticks per axis and a legend.
fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: Option<(f64, f64)>) -> Canvas {
    let (w, h) = (640i64, 420i64);
    let (left, right, top, bottom) = (70i64, 470i64, 40i64, 360i64);
    let mut cv = Canvas::new(w as u32, h as u32);
    let xs = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), 0.0);
    let ys = y_range.unwrap_or_else(|| padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))));
    let px = |x: f64| left + ((x - xs.0) / (xs.1 - xs.0) * (right - left) as f64).round() as i64;
    let py = |y: f64| bottom - ((y - ys.0) / (ys.1 - ys.0) * (bottom - top) as f64).round() as i64;
    for i in 0..=4 {
        let fy = ys.0 + (ys.1 - ys.0) * i as f64 / 4.0;
        let fx = xs.0 + (xs.1 - xs.0) * i as f64 / 4.0;
        cv.line((left, py(fy)), (right, py(fy)), GREY);
        cv.text_right(left - 6, py(fy) - 5, &tick_label(fy), BLACK);
        cv.text(px(fx) - 2 * CHAR_W, bottom + 8, &tick_label(fx), BLACK);
    }
    cv.line((left, top), (left, bottom), BLACK);
    cv.line((left, bottom), (right, bottom), BLACK);
    cv.text(left, 4, title, BLACK);
    cv.text(left, bottom + 30, x_label, BLACK);
    cv.text(8, top - 18, y_label, BLACK);
    for (k, s) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| (px(x), py(y))).collect();
        for pair in pts.windows(2) {
            cv.line(pair[0], pair[1], c);
        }
        for &(x, y) in &pts {
            cv.rect(x - 2, y - 2, x + 2, y + 2, c);
        }
        let ly = top + 16 * k as i64;
        cv.rect(right + 12, ly, right + 22, ly + 9, c);
        cv.text(right + 28, ly, &s.name, BLACK);
    }
    cv
}

/// Horizontal bars with the label on the left and the value on the right.
fn bar_chart(title: &str, bars: &[(String, f64)], max: Option<f64>) -> Canvas {
    let label_w = bars.iter().map(|b| b.0.chars().count()).max().unwrap_or(0).min(40) as i64 * CHAR_W + 16;
    let (bar_w, row_h) = (360i64, 18i64);
    let w = label_w + bar_w + 90;
    let h = 50 + row_h * bars.len() as i64;
    let mut cv = Canvas::new(w as u32, h as u32);
    cv.text(8, 12, title, BLACK);
    let top = max.unwrap_or_else(|| bars.iter().map(|b| b.1).fold(0.0, f64::max)).max(1e-12);
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = 40 + row_h * i as i64;
        let short: String = label.chars().take(40).collect();
        cv.text(8, y + 2, &short, BLACK);
        let len = ((v.max(0.0) / top).min(1.0) * bar_w as f64).round() as i64;
        cv.rect(label_w, y, label_w + bar_w, y + row_h - 5, GREY);
        if len > 0 {
            cv.rect(label_w, y, label_w + len - 1, y + row_h - 5, PALETTE[0]);
        }
        cv.text(label_w + bar_w + 8, y + 2, &format!("{v:.3}"), BLACK);
    }
    cv
}

/// Row-major grid of values in `[0, max]` from white to dark blue.
fn heatmap(title: &str, values: &[f64], nx: usize, ny: usize) -> Canvas {
    let cell = (360 / nx.max(ny).max(1)).max(2) as i64;
    let (w, h) = (nx as i64 * cell + 40, ny as i64 * cell + 60);
    let mut cv = Canvas::new(w as u32, h as u32);
    cv.text(8, 12, title, BLACK);
    let max = values.iter().cloned().fold(0.0, f64::max).max(1e-12);
    for j in 0..ny {
        for i in 0..nx {
            let t = (values[j * nx + i] / max).clamp(0.0, 1.0);
            let c = Rgb([
                (255.0 * (1.0 - t)) as u8,
                (255.0 * (1.0 - 0.8 * t)) as u8,
                (255.0 - 100.0 * t) as u8,
            ]);
            // First grid row is the lowest y, drawn at the bottom.
            let y0 = 40 + (ny - 1 - j) as i64 * cell;
            let x0 = 20 + i as i64 * cell;
            cv.rect(x0, y0, x0 + cell - 1, y0 + cell - 1, c);
        }
    }
    cv.text(20, h - 16, &format!("max {max:.3}"), BLACK);
    cv
}

// ---------------------------------------------------------------------------
// Kinds.

fn consistency_charts(report: &ConsistencyReport) -> Vec<(String, Canvas)> {
    report
        .curves
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let n = c.binned.bins.len().max(1) as f64;
            let pts = c.binned.populated().into_iter().map(|(b, m)| ((b as f64 + 0.5) / n, m)).collect();
            let title = match c.spearman {
                Some(rho) => format!("{} (spearman {rho:.2})", c.name),
                None => c.name.clone(),
            };
            let chart = line_chart(&title, &c.x_label, &c.y_label, &[Series { name: "bin mean".into(), points: pts }], None);
            (format!("consistency-{}-{}", i + 1, c.name), chart)
        })
        .collect()
}

fn cells(report: &AttackReport, metric: MetricKind) -> Vec<(String, f64)> {
    report
        .cells
        .iter()
        .filter(|c| c.metric == metric && c.status == CellStatus::Ok)
        .filter_map(|c| c.value.map(|v| (c.id.clone(), v)))
        .collect()
}

/// Ids shaped `L<len>/<regime>/<method>/<risk>` become one series per
/// regime and method.
fn watermark_series(report: &AttackReport, metric: MetricKind) -> Vec<Series> {
    let mut by_name: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (id, v) in cells(report, metric) {
        let parts: Vec<&str> = id.split('/').collect();
        if parts.len() != 4 {
            continue;
        }
        if let Some(l) = parts[0].strip_prefix('L').and_then(|l| l.parse::<f64>().ok()) {
            by_name.entry(format!("{} {}", parts[1], parts[2])).or_default().push((l, v));
        }
    }
    by_name
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect()
}

fn density_chart(report: &AttackReport) -> Option<Canvas> {
    let results: Vec<DensitySeedResult> = serde_json::from_value(report.details.clone()).ok()?;
    let first = results.first()?;
    let mut series = Vec::new();
    for (factor, rep) in &first.reports {
        let n = rep.clean_counts.len().max(1) as f64;
        let hist = |counts: &[usize]| counts.iter().enumerate().map(|(i, &c)| ((i as f64 + 0.5) / n, c as f64)).collect();
        series.push(Series {
            name: format!("clean r={factor}"),
            points: hist(&rep.clean_counts),
        });
        series.push(Series {
            name: format!("adv r={factor}"),
            points: hist(&rep.adversarial_counts),
        });
    }
    if series.is_empty() {
        return None;
    }
    Some(line_chart(
        &format!("density shift, seed {}", first.seed),
        "normalised density",
        "count",
        &series,
        None,
    ))
}

fn render(source: &PlotSource, kind: &str) -> Vec<(String, Canvas)> {
    match (source, kind) {
        (PlotSource::Toy(r), "consistency") => consistency_charts(&r.consistency),
        (PlotSource::Toy(r), "grid") => {
            let (nx, ny) = (r.grid.grid.xs.len(), r.grid.grid.ys.len());
            vec![("grid".into(), heatmap("mean pairwise output difference", &r.grid.difference, nx, ny))]
        }
        (PlotSource::Attack(r), "transfer") => {
            let bars = cells(r, MetricKind::TargetedSuccess);
            if bars.is_empty() {
                return vec![];
            }
            vec![("transfer".into(), bar_chart("targeted success rate", &bars, Some(1.0)))]
        }
        (PlotSource::Attack(r), "psnr") => {
            let bars = cells(r, MetricKind::Psnr);
            if bars.is_empty() {
                return vec![];
            }
            vec![("psnr".into(), bar_chart("PSNR (dB)", &bars, None))]
        }
        (PlotSource::Attack(r), "erasure" | "tampering") => {
            let metric = if kind == "erasure" { MetricKind::ErasureDet } else { MetricKind::TamperDet };
            let series = watermark_series(r, metric);
            if series.is_empty() {
                return vec![];
            }
            let title = format!("{kind} detection rate");
            vec![(kind.to_string(), line_chart(&title, "message length", "rate", &series, Some((0.0, 1.0))))]
        }
        (PlotSource::Attack(r), "density_shift") => density_chart(r).map(|c| vec![("density_shift".to_string(), c)]).unwrap_or_default(),
        _ => vec![],
    }
}

/// Kinds that produce at least one file for this source.
pub fn available_kinds(source: &PlotSource) -> Vec<String> {
    KINDS.iter().filter(|k| !render(source, k).is_empty()).map(|k| k.to_string()).collect()
}

/// Writes `<hash16>-<name>.png` into `dir` for every requested kind.
pub fn emit_plots(source: &PlotSource, kinds: &[String], dir: &Path, report_hash: &str) -> Result<Vec<PathBuf>, PlotError> {
    if let Some(bad) = kinds.iter().find(|k| !KINDS.contains(&k.as_str())) {
        return Err(PlotError::UnknownKind { kind: bad.clone() });
    }
    let prefix = &report_hash[..16.min(report_hash.len())];
    let mut written = Vec::new();
    for kind in kinds {
        let charts = render(source, kind);
        if charts.is_empty() {
            return Err(PlotError::NoData {
                kind: kind.clone(),
                available: available_kinds(source),
            });
        }
        std::fs::create_dir_all(dir).map_err(image::ImageError::IoError)?;
        for (name, canvas) in charts {
            let path = dir.join(format!("{prefix}-{name}.png"));
            canvas.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}
