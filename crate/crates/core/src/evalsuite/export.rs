//! Artifact export: metric tables as CSV/JSON, line charts and scatter
//! plots as SVG/PNG, and correlation heatmaps on a fixed diverging
//! [-1, 1] color scale. All renderers are deterministic so exported
//! artifacts can be compared byte-for-byte across runs.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

use super::studies::ScatterPoint;
use super::{AblationCurve, MetricRecord};

const CHART_W: u32 = 640;
const CHART_H: u32 = 400;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 46.0;

/// Series colors, shared between SVG and PNG renderers.
pub const LINE_PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [140, 86, 75],
];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Eval(format!("csv: {other:?}")),
    }
}

fn image_err(e: image::ImageError) -> Error {
    Error::Eval(format!("image: {e}"))
}

/// One CSV row per record: `name,value` plus one column per context key
/// seen anywhere in the batch (sorted, blank where absent).
pub fn metrics_csv_string(records: &[MetricRecord]) -> Result<String> {
    let keys: BTreeSet<&str> =
        records.iter().flat_map(|r| r.context.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["name", "value"];
    header.extend(keys.iter().copied());
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.name.clone(), r.value.to_string()];
        for &k in &keys {
            row.push(r.context.get(k).cloned().unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Eval(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Eval(format!("csv: {e}")))
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    Ok(fs::write(path, metrics_csv_string(records)?)?)
}

/// JSON summary: the full record list plus per-name count/mean/min/max.
pub fn metrics_json_value(records: &[MetricRecord]) -> serde_json::Value {
    let mut by_name = serde_json::Map::new();
    let names: BTreeSet<&str> = records.iter().map(|r| r.name.as_str()).collect();
    for name in names {
        let values: Vec<f64> =
            records.iter().filter(|r| r.name == name).map(|r| r.value).collect();
        let n = values.len() as f64;
        by_name.insert(
            name.to_string(),
            serde_json::json!({
                "count": values.len(),
                "mean": values.iter().sum::<f64>() / n,
                "min": values.iter().cloned().fold(f64::INFINITY, f64::min),
                "max": values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }),
        );
    }
    serde_json::json!({
        "kind": "rebottleneck_metrics",
        "format_version": 1,
        "count": records.len(),
        "by_name": by_name,
        "records": records,
    })
}

pub fn write_metrics_json(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&metrics_json_value(records))?;
    text.push('\n');
    Ok(fs::write(path, text)?)
}

pub fn ablation_csv_string(curves: &[AblationCurve]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "m", "stft", "mel", "sisdr"]).map_err(csv_err)?;
    for curve in curves {
        for p in &curve.points {
            w.write_record([
                curve.strategy.name().to_string(),
                p.m.to_string(),
                p.stft.to_string(),
                p.mel.to_string(),
                p.sisdr.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Eval(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Eval(format!("csv: {e}")))
}

pub fn write_ablation_csv(path: &Path, curves: &[AblationCurve]) -> Result<()> {
    Ok(fs::write(path, ablation_csv_string(curves)?)?)
}

/// Which AblationPoint column a chart plots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMetric {
    Stft,
    Mel,
    Sisdr,
}

impl AblationMetric {
    pub fn name(&self) -> &'static str {
        match self {
            AblationMetric::Stft => "stft",
            AblationMetric::Mel => "mel",
            AblationMetric::Sisdr => "sisdr",
        }
    }

    fn pick(&self, p: &super::AblationPoint) -> f64 {
        match self {
            AblationMetric::Stft => p.stft,
            AblationMetric::Mel => p.mel,
            AblationMetric::Sisdr => p.sisdr,
        }
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Connect points with lines; scatter plots set this false.
    pub draw_lines: bool,
}

/// One series per strategy, x = retained channels m.
pub fn ablation_chart(curves: &[AblationCurve], metric: AblationMetric) -> Result<ChartSpec> {
    if curves.is_empty() {
        return Err(Error::Eval("no ablation curves to plot".into()));
    }
    let series = curves
        .iter()
        .map(|c| Series {
            label: c.strategy.name().to_string(),
            points: c.points.iter().map(|p| (p.m as f64, metric.pick(p))).collect(),
        })
        .collect();
    Ok(ChartSpec {
        title: format!("channel ablation ({})", metric.name()),
        x_label: "retained channels m".into(),
        y_label: metric.name().into(),
        series,
        draw_lines: true,
    })
}

/// Groups scatter points by label into marker-only series.
pub fn scatter_chart(title: &str, points: &[ScatterPoint]) -> Result<ChartSpec> {
    if points.is_empty() {
        return Err(Error::Eval("no scatter points to plot".into()));
    }
    let labels: BTreeSet<&str> = points.iter().map(|p| p.label.as_str()).collect();
    let series = labels
        .into_iter()
        .map(|label| Series {
            label: label.to_string(),
            points: points
                .iter()
                .filter(|p| p.label == label)
                .map(|p| (p.x, p.y))
                .collect(),
        })
        .collect();
    Ok(ChartSpec {
        title: title.to_string(),
        x_label: "pc 1".into(),
        y_label: "pc 2".into(),
        series,
        draw_lines: false,
    })
}

struct Frame {
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn from_spec(spec: &ChartSpec) -> Result<Frame> {
        if spec.series.is_empty() || spec.series.iter().any(|s| s.points.is_empty()) {
            return Err(Error::Eval("chart needs at least one point per series".into()));
        }
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &spec.series {
            for &(x, y) in &s.points {
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::NonFinite(format!("chart point ({x}, {y})")));
                }
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y);
                ymax = ymax.max(y);
            }
        }
        let expand = |lo: &mut f64, hi: &mut f64| {
            if lo == hi {
                let pad = lo.abs().max(1.0) * 0.5;
                *lo -= pad;
                *hi += pad;
            } else {
                let pad = (*hi - *lo) * 0.05;
                *lo -= pad;
                *hi += pad;
            }
        };
        expand(&mut xmin, &mut xmax);
        expand(&mut ymin, &mut ymax);
        Ok(Frame { xmin, xmax, ymin, ymax })
    }

    fn x_px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.xmin) / (self.xmax - self.xmin) * (CHART_W as f64 - MARGIN_L - MARGIN_R)
    }

    fn y_px(&self, y: f64) -> f64 {
        CHART_H as f64
            - MARGIN_B
            - (y - self.ymin) / (self.ymax - self.ymin) * (CHART_H as f64 - MARGIN_T - MARGIN_B)
    }
}

fn nice_ticks(min: f64, max: f64, target: usize) -> Vec<f64> {
    let raw = (max - min) / target.max(1) as f64;
    let mag = 10f64.powf(raw.abs().log10().floor());
    let norm = raw / mag;
    let step = mag * if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    let mut ticks = Vec::new();
    let mut t = (min / step).ceil() * step;
    while t <= max + step * 1e-9 {
        // Snap values that should be zero.
        ticks.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0).min(6.0) as usize;
    format!("{v:.decimals$}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn hex_color(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

pub fn line_chart_svg(spec: &ChartSpec) -> Result<String> {
    let frame = Frame::from_spec(spec)?;
    let xticks = nice_ticks(frame.xmin, frame.xmax, 6);
    let yticks = nice_ticks(frame.ymin, frame.ymax, 5);
    let xstep = if xticks.len() > 1 { xticks[1] - xticks[0] } else { 1.0 };
    let ystep = if yticks.len() > 1 { yticks[1] - yticks[0] } else { 1.0 };
    let (pl, pr) = (MARGIN_L, CHART_W as f64 - MARGIN_R);
    let (pt, pb) = (MARGIN_T, CHART_H as f64 - MARGIN_B);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" \
         viewBox=\"0 0 {CHART_W} {CHART_H}\" font-family=\"monospace\">\n"
    ));
    out.push_str(&format!("<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>\n"));

    for &t in &yticks {
        let y = frame.y_px(t);
        out.push_str(&format!(
            "<line x1=\"{pl:.2}\" y1=\"{y:.2}\" x2=\"{pr:.2}\" y2=\"{y:.2}\" stroke=\"#e0e0e0\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            pl - 6.0,
            y + 4.0,
            fmt_tick(t, ystep)
        ));
    }
    for &t in &xticks {
        let x = frame.x_px(t);
        out.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{pt:.2}\" x2=\"{x:.2}\" y2=\"{pb:.2}\" stroke=\"#e0e0e0\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            pb + 16.0,
            fmt_tick(t, xstep)
        ));
    }
    out.push_str(&format!(
        "<rect x=\"{pl:.2}\" y=\"{pt:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#333333\"/>\n",
        pr - pl,
        pb - pt
    ));

    for (i, s) in spec.series.iter().enumerate() {
        let color = hex_color(LINE_PALETTE[i % LINE_PALETTE.len()]);
        if spec.draw_lines && s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", frame.x_px(x), frame.y_px(y)))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                pts.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            out.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                frame.x_px(x),
                frame.y_px(y)
            ));
        }
    }

    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"18\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        CHART_W as f64 / 2.0,
        xml_escape(&spec.title)
    ));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
        (pl + pr) / 2.0,
        CHART_H as f64 - 10.0,
        xml_escape(&spec.x_label)
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {:.2})\">{}</text>\n",
        (pt + pb) / 2.0,
        (pt + pb) / 2.0,
        xml_escape(&spec.y_label)
    ));

    if spec.series.iter().any(|s| !s.label.is_empty()) {
        let entry_h = 14.0;
        let width = spec.series.iter().map(|s| s.label.len()).max().unwrap_or(0) as f64 * 7.0 + 28.0;
        let (lx, ly) = (pr - width - 8.0, pt + 8.0);
        out.push_str(&format!(
            "<rect x=\"{lx:.2}\" y=\"{ly:.2}\" width=\"{width:.2}\" height=\"{:.2}\" \
             fill=\"white\" stroke=\"#999999\"/>\n",
            spec.series.len() as f64 * entry_h + 6.0
        ));
        for (i, s) in spec.series.iter().enumerate() {
            let color = hex_color(LINE_PALETTE[i % LINE_PALETTE.len()]);
            let ey = ly + 12.0 + i as f64 * entry_h;
            out.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
                lx + 4.0,
                ey - 3.0,
                lx + 18.0,
                ey - 3.0
            ));
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{ey:.2}\" font-size=\"11\">{}</text>\n",
                lx + 22.0,
                xml_escape(&s.label)
            ));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_line_chart_svg(path: &Path, spec: &ChartSpec) -> Result<()> {
    Ok(fs::write(path, line_chart_svg(spec)?)?)
}

/// 5x7 column font (the ubiquitous HD44780 glyphs), uppercase plus the
/// punctuation chart labels need. Bit n of a column is row n from the top.
fn glyph(ch: char) -> [u8; 5] {
    match ch.to_ascii_uppercase() {
        '0' => [0x3E, 0x51, 0x49, 0x45, 0x3E],
        '1' => [0x00, 0x42, 0x7F, 0x40, 0x00],
        '2' => [0x42, 0x61, 0x51, 0x49, 0x46],
        '3' => [0x21, 0x41, 0x45, 0x4B, 0x31],
        '4' => [0x18, 0x14, 0x12, 0x7F, 0x10],
        '5' => [0x27, 0x45, 0x45, 0x45, 0x39],
        '6' => [0x3C, 0x4A, 0x49, 0x49, 0x30],
        '7' => [0x01, 0x71, 0x09, 0x05, 0x03],
        '8' => [0x36, 0x49, 0x49, 0x49, 0x36],
        '9' => [0x06, 0x49, 0x49, 0x29, 0x1E],
        'A' => [0x7E, 0x11, 0x11, 0x11, 0x7E],
        'B' => [0x7F, 0x49, 0x49, 0x49, 0x36],
        'C' => [0x3E, 0x41, 0x41, 0x41, 0x22],
        'D' => [0x7F, 0x41, 0x41, 0x22, 0x1C],
        'E' => [0x7F, 0x49, 0x49, 0x49, 0x41],
        'F' => [0x7F, 0x09, 0x09, 0x09, 0x01],
        'G' => [0x3E, 0x41, 0x49, 0x49, 0x7A],
        'H' => [0x7F, 0x08, 0x08, 0x08, 0x7F],
        'I' => [0x00, 0x41, 0x7F, 0x41, 0x00],
        'J' => [0x20, 0x40, 0x41, 0x3F, 0x01],
        'K' => [0x7F, 0x08, 0x14, 0x22, 0x41],
        'L' => [0x7F, 0x40, 0x40, 0x40, 0x40],
        'M' => [0x7F, 0x02, 0x0C, 0x02, 0x7F],
        'N' => [0x7F, 0x04, 0x08, 0x10, 0x7F],
        'O' => [0x3E, 0x41, 0x41, 0x41, 0x3E],
        'P' => [0x7F, 0x09, 0x09, 0x09, 0x06],
        'Q' => [0x3E, 0x41, 0x51, 0x21, 0x5E],
        'R' => [0x7F, 0x09, 0x19, 0x29, 0x46],
        'S' => [0x46, 0x49, 0x49, 0x49, 0x31],
        'T' => [0x01, 0x01, 0x7F, 0x01, 0x01],
        'U' => [0x3F, 0x40, 0x40, 0x40, 0x3F],
        'V' => [0x1F, 0x20, 0x40, 0x20, 0x1F],
        'W' => [0x3F, 0x40, 0x38, 0x40, 0x3F],
        'X' => [0x63, 0x14, 0x08, 0x14, 0x63],
        'Y' => [0x07, 0x08, 0x70, 0x08, 0x07],
        'Z' => [0x61, 0x51, 0x49, 0x45, 0x43],
        '.' => [0x00, 0x60, 0x60, 0x00, 0x00],
        ',' => [0x00, 0x50, 0x30, 0x00, 0x00],
        '-' => [0x08, 0x08, 0x08, 0x08, 0x08],
        '+' => [0x08, 0x08, 0x3E, 0x08, 0x08],
        ':' => [0x00, 0x36, 0x36, 0x00, 0x00],
        '=' => [0x14, 0x14, 0x14, 0x14, 0x14],
        '(' => [0x00, 0x1C, 0x22, 0x41, 0x00],
        ')' => [0x00, 0x41, 0x22, 0x1C, 0x00],
        '/' => [0x20, 0x10, 0x08, 0x04, 0x02],
        '%' => [0x23, 0x13, 0x08, 0x64, 0x62],
        '_' => [0x40, 0x40, 0x40, 0x40, 0x40],
        _ => [0x00, 0x00, 0x00, 0x00, 0x00],
    }
}

fn put_px(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for (c, col) in g.iter().enumerate() {
            for r in 0..7 {
                if col >> r & 1 == 1 {
                    put_px(img, x + i as i64 * 6 + c as i64, y + r, color);
                }
            }
        }
    }
}

/// Bottom-to-top text for the y-axis label.
fn draw_text_vertical(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for (c, col) in g.iter().enumerate() {
            for r in 0..7 {
                if col >> r & 1 == 1 {
                    put_px(img, x + r, y - i as i64 * 6 - c as i64, color);
                }
            }
        }
    }
}

fn text_width(text: &str) -> i64 {
    text.chars().count() as i64 * 6
}

fn draw_line_px(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let (mut x0, mut y0) = (x0.round() as i64, y0.round() as i64);
    let (x1, y1) = (x1.round() as i64, y1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put_px(img, x0, y0, color);
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

fn draw_marker(img: &mut RgbImage, x: f64, y: f64, color: [u8; 3]) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dx in -1..=1 {
        for dy in -1..=1 {
            put_px(img, cx + dx, cy + dy, color);
        }
    }
}

pub fn line_chart_png(spec: &ChartSpec) -> Result<RgbImage> {
    let frame = Frame::from_spec(spec)?;
    let xticks = nice_ticks(frame.xmin, frame.xmax, 6);
    let yticks = nice_ticks(frame.ymin, frame.ymax, 5);
    let xstep = if xticks.len() > 1 { xticks[1] - xticks[0] } else { 1.0 };
    let ystep = if yticks.len() > 1 { yticks[1] - yticks[0] } else { 1.0 };
    let (pl, pr) = (MARGIN_L, CHART_W as f64 - MARGIN_R);
    let (pt, pb) = (MARGIN_T, CHART_H as f64 - MARGIN_B);
    let grid = [224, 224, 224];
    let ink = [51, 51, 51];

    let mut img = RgbImage::from_pixel(CHART_W, CHART_H, Rgb([255, 255, 255]));
    for &t in &yticks {
        let y = frame.y_px(t);
        draw_line_px(&mut img, pl, y, pr, y, grid);
        let label = fmt_tick(t, ystep);
        draw_text(&mut img, (pl - 8.0) as i64 - text_width(&label), y as i64 - 3, &label, ink);
    }
    for &t in &xticks {
        let x = frame.x_px(t);
        draw_line_px(&mut img, x, pt, x, pb, grid);
        let label = fmt_tick(t, xstep);
        draw_text(&mut img, x as i64 - text_width(&label) / 2, (pb + 8.0) as i64, &label, ink);
    }
    draw_line_px(&mut img, pl, pt, pr, pt, ink);
    draw_line_px(&mut img, pl, pb, pr, pb, ink);
    draw_line_px(&mut img, pl, pt, pl, pb, ink);
    draw_line_px(&mut img, pr, pt, pr, pb, ink);

    for (i, s) in spec.series.iter().enumerate() {
        let color = LINE_PALETTE[i % LINE_PALETTE.len()];
        if spec.draw_lines {
            for w in s.points.windows(2) {
                draw_line_px(
                    &mut img,
                    frame.x_px(w[0].0),
                    frame.y_px(w[0].1),
                    frame.x_px(w[1].0),
                    frame.y_px(w[1].1),
                    color,
                );
            }
        }
        for &(x, y) in &s.points {
            draw_marker(&mut img, frame.x_px(x), frame.y_px(y), color);
        }
    }

    draw_text(
        &mut img,
        CHART_W as i64 / 2 - text_width(&spec.title) / 2,
        8,
        &spec.title,
        ink,
    );
    draw_text(
        &mut img,
        ((pl + pr) / 2.0) as i64 - text_width(&spec.x_label) / 2,
        CHART_H as i64 - 14,
        &spec.x_label,
        ink,
    );
    draw_text_vertical(
        &mut img,
        4,
        ((pt + pb) / 2.0) as i64 + text_width(&spec.y_label) / 2,
        &spec.y_label,
        ink,
    );

    if spec.series.iter().any(|s| !s.label.is_empty()) {
        let entry_h = 12i64;
        let width = spec.series.iter().map(|s| text_width(&s.label)).max().unwrap_or(0) + 26;
        let (lx, ly) = ((pr - 8.0) as i64 - width, (pt + 8.0) as i64);
        let height = spec.series.len() as i64 * entry_h + 6;
        for x in lx..lx + width {
            for y in ly..ly + height {
                put_px(&mut img, x, y, [255, 255, 255]);
            }
        }
        draw_line_px(&mut img, lx as f64, ly as f64, (lx + width) as f64, ly as f64, ink);
        draw_line_px(&mut img, lx as f64, (ly + height) as f64, (lx + width) as f64, (ly + height) as f64, ink);
        draw_line_px(&mut img, lx as f64, ly as f64, lx as f64, (ly + height) as f64, ink);
        draw_line_px(&mut img, (lx + width) as f64, ly as f64, (lx + width) as f64, (ly + height) as f64, ink);
        for (i, s) in spec.series.iter().enumerate() {
            let color = LINE_PALETTE[i % LINE_PALETTE.len()];
            let ey = ly + 5 + i as i64 * entry_h;
            for x in lx + 4..lx + 18 {
                put_px(&mut img, x, ey + 3, color);
                put_px(&mut img, x, ey + 4, color);
            }
            draw_text(&mut img, lx + 22, ey, &s.label, ink);
        }
    }
    Ok(img)
}

pub fn write_line_chart_png(path: &Path, spec: &ChartSpec) -> Result<()> {
    let img = line_chart_png(spec)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    DynamicImage::ImageRgb8(img).write_to(&mut w, ImageFormat::Png).map_err(image_err)
}

/// Fixed diverging colormap on [-1, 1]: blue, white at zero, red.
pub fn diverging_color(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let lerp = |a: [u8; 3], b: [u8; 3], t: f64| {
        [
            (a[0] as f64 + (b[0] as f64 - a[0] as f64) * t).round() as u8,
            (a[1] as f64 + (b[1] as f64 - a[1] as f64) * t).round() as u8,
            (a[2] as f64 + (b[2] as f64 - a[2] as f64) * t).round() as u8,
        ]
    };
    let blue = [33, 102, 172];
    let white = [247, 247, 247];
    let red = [178, 24, 43];
    if v < 0.0 {
        lerp(blue, white, v + 1.0)
    } else {
        lerp(white, red, v)
    }
}

fn check_heatmap(m: &Array2<f64>) -> Result<()> {
    if m.is_empty() {
        return Err(Error::Eval("empty heatmap matrix".into()));
    }
    if let Some(v) = m.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("heatmap cell {v}")));
    }
    Ok(())
}

pub fn heatmap_svg(title: &str, m: &Array2<f64>) -> Result<String> {
    check_heatmap(m)?;
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let cell = 28.0;
    let (ox, oy) = (34.0, 46.0);
    let w = ox + cols as f64 * cell + 10.0;
    let h = oy + rows as f64 * cell + 10.0;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"monospace\">\n"
    ));
    out.push_str(&format!("<rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"white\"/>\n"));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"18\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    ));
    for r in 0..rows {
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\">{r}</text>\n",
            ox - 6.0,
            oy + r as f64 * cell + cell / 2.0 + 3.0
        ));
        for c in 0..cols {
            if r == 0 {
                out.push_str(&format!(
                    "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{c}</text>\n",
                    ox + c as f64 * cell + cell / 2.0,
                    oy - 6.0
                ));
            }
            let v = m[[r, c]];
            out.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\"/>\n",
                ox + c as f64 * cell,
                oy + r as f64 * cell,
                hex_color(diverging_color(v))
            ));
            if rows <= 12 && cols <= 12 {
                let text_color = if v.abs() > 0.6 { "#ffffff" } else { "#333333" };
                out.push_str(&format!(
                    "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"8\" text-anchor=\"middle\" fill=\"{text_color}\">{v:.2}</text>\n",
                    ox + c as f64 * cell + cell / 2.0,
                    oy + r as f64 * cell + cell / 2.0 + 3.0
                ));
            }
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_heatmap_svg(path: &Path, title: &str, m: &Array2<f64>) -> Result<()> {
    Ok(fs::write(path, heatmap_svg(title, m)?)?)
}

pub fn heatmap_png(title: &str, m: &Array2<f64>) -> Result<RgbImage> {
    check_heatmap(m)?;
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let cell = 24u32;
    let title_h = if title.is_empty() { 0 } else { 16 };
    let w = cols as u32 * (cell + 1) + 1;
    let h = title_h + rows as u32 * (cell + 1) + 1;
    let mut img = RgbImage::from_pixel(w.max(title.len() as u32 * 6 + 8), h, Rgb([255, 255, 255]));
    if title_h > 0 {
        draw_text(&mut img, 4, 4, title, [51, 51, 51]);
    }
    for r in 0..rows {
        for c in 0..cols {
            let color = diverging_color(m[[r, c]]);
            let x0 = c as u32 * (cell + 1) + 1;
            let y0 = title_h + r as u32 * (cell + 1) + 1;
            for dx in 0..cell {
                for dy in 0..cell {
                    img.put_pixel(x0 + dx, y0 + dy, Rgb(color));
                }
            }
        }
    }
    Ok(img)
}

pub fn write_heatmap_png(path: &Path, title: &str, m: &Array2<f64>) -> Result<()> {
    let img = heatmap_png(title, m)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    DynamicImage::ImageRgb8(img).write_to(&mut w, ImageFormat::Png).map_err(image_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsuite::{AblationPoint, AblationStrategy};

    fn sample_records() -> Vec<MetricRecord> {
        vec![
            MetricRecord::new("cka", 0.75).unwrap().with("pair", "bottleneck-target"),
            MetricRecord::new("cka", 0.25).unwrap().with("pair", "probe-target"),
            MetricRecord::new("equivariance_error", 0.01).unwrap().with("alpha_hz", "500"),
        ]
    }

    fn sample_chart() -> ChartSpec {
        ChartSpec {
            title: "demo".into(),
            x_label: "m".into(),
            y_label: "stft".into(),
            series: vec![
                Series { label: "ordered".into(), points: vec![(1.0, 3.0), (2.0, 2.0), (3.0, 1.5)] },
                Series { label: "random".into(), points: vec![(1.0, 5.0), (2.0, 4.2), (3.0, 1.6)] },
            ],
            draw_lines: true,
        }
    }

    #[test]
    fn metrics_csv_has_sorted_header_and_blank_cells() {
        let text = metrics_csv_string(&sample_records()).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> =
            rdr.headers().unwrap().iter().map(str::to_string).collect();
        assert_eq!(header, vec!["name", "value", "alpha_hz", "pair"]);
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(&rows[0][0], "cka");
        assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.75);
        assert_eq!(&rows[0][2], "", "absent context key is blank");
        assert_eq!(&rows[2][2], "500");
        assert_eq!(&rows[2][3], "");
    }

    #[test]
    fn metrics_json_summarizes_by_name() {
        let v = metrics_json_value(&sample_records());
        assert_eq!(v["count"], 3);
        assert_eq!(v["by_name"]["cka"]["count"], 2);
        assert!((v["by_name"]["cka"]["mean"].as_f64().unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(v["by_name"]["cka"]["max"].as_f64().unwrap(), 0.75);
        assert_eq!(v["records"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn ablation_csv_one_row_per_point() {
        let curves = vec![AblationCurve {
            strategy: AblationStrategy::Pca,
            points: vec![
                AblationPoint { m: 1, stft: 2.0, mel: 1.0, sisdr: -3.0 },
                AblationPoint { m: 2, stft: 1.0, mel: 0.5, sisdr: 4.0 },
            ],
        }];
        let text = ablation_csv_string(&curves).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "strategy,m,stft,mel,sisdr");
        assert!(lines[1].starts_with("pca,1,"));
    }

    #[test]
    fn svg_chart_is_deterministic_and_structured() {
        let spec = sample_chart();
        let a = line_chart_svg(&spec).unwrap();
        let b = line_chart_svg(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("demo"));
        assert!(a.contains("ordered"));

        let bad = ChartSpec {
            series: vec![Series { label: String::new(), points: vec![(0.0, f64::NAN)] }],
            ..sample_chart()
        };
        assert!(line_chart_svg(&bad).is_err());
        let empty = ChartSpec { series: vec![], ..sample_chart() };
        assert!(line_chart_svg(&empty).is_err());
    }

    #[test]
    fn png_chart_renders_and_roundtrips() {
        let spec = sample_chart();
        let img = line_chart_png(&spec).unwrap();
        assert_eq!((img.width(), img.height()), (CHART_W, CHART_H));
        let non_white = img.pixels().filter(|p| p.0 != [255, 255, 255]).count();
        assert!(non_white > 500, "chart drew {non_white} inked pixels");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        write_line_chart_png(&path, &spec).unwrap();
        let loaded = image::open(&path).unwrap().to_rgb8();
        assert_eq!(loaded.dimensions(), (CHART_W, CHART_H));
        assert_eq!(loaded, img);
    }

    #[test]
    fn scatter_chart_groups_by_label() {
        let points = vec![
            ScatterPoint { x: 0.0, y: 1.0, label: "tone".into() },
            ScatterPoint { x: 1.0, y: 0.0, label: "noise".into() },
            ScatterPoint { x: 0.5, y: 0.5, label: "tone".into() },
        ];
        let spec = scatter_chart("pooled latent scatter", &points).unwrap();
        assert!(!spec.draw_lines);
        assert_eq!(spec.series.len(), 2);
        let tone = spec.series.iter().find(|s| s.label == "tone").unwrap();
        assert_eq!(tone.points.len(), 2);
        let svg = line_chart_svg(&spec).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 0, "scatter draws markers only");
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn diverging_colormap_endpoints() {
        assert_eq!(diverging_color(-1.0), [33, 102, 172]);
        assert_eq!(diverging_color(0.0), [247, 247, 247]);
        assert_eq!(diverging_color(1.0), [178, 24, 43]);
        assert_eq!(diverging_color(-5.0), diverging_color(-1.0), "clamped");
        let mid = diverging_color(0.5);
        assert!(mid[0] > 178 && mid[2] < 247, "halfway to red: {mid:?}");
    }

    #[test]
    fn heatmap_outputs_cover_all_cells() {
        let m = ndarray::array![[1.0, -0.5], [-0.5, 1.0]];
        let svg = heatmap_svg("corr", &m).unwrap();
        // Background rect plus one per cell.
        assert_eq!(svg.matches("<rect").count(), 5);
        assert!(svg.contains("#b2182b"), "unit diagonal is full red");
        assert!(svg.contains("1.00"));

        let img = heatmap_png("corr", &m).unwrap();
        assert_eq!(img.get_pixel(2, 18).0, [178, 24, 43]);
        assert!(heatmap_png("x", &Array2::from_elem((1, 1), f64::NAN)).is_err());
        assert!(heatmap_svg("x", &Array2::zeros((0, 2))).is_err());
    }
}
