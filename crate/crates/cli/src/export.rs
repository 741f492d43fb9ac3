//! `rebot export`: re-renders artifacts stored by `eval` (metrics.json,
//! ablation.json, correlation.json, scatter.csv) as CSV tables or SVG/PNG
//! figures, without touching a checkpoint or the dataset.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ndarray::Array2;
use rebot_core::evalsuite::export::{
    ablation_chart, write_ablation_csv, write_heatmap_png, write_heatmap_svg,
    write_line_chart_png, write_line_chart_svg, write_metrics_csv, AblationMetric, ChartSpec,
    Series,
};
use rebot_core::evalsuite::studies::ScatterPoint;
use rebot_core::evalsuite::{AblationCurve, MetricRecord};
use rebot_core::{Error, Result};

use crate::{write_snapshot, CommonArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Svg,
    Png,
}

impl Format {
    fn name(&self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Svg => "svg",
            Format::Png => "png",
        }
    }
}

#[derive(Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Directory holding `eval` outputs.
    #[arg(long)]
    pub metrics: PathBuf,

    /// Target format.
    #[arg(long, value_enum)]
    pub format: Format,
}

/// Rebuilds the equivariance error-vs-cutoff chart from sweep records.
/// Returns `None` when the records hold no sweep.
pub fn equivariance_chart(records: &[MetricRecord]) -> Result<Option<ChartSpec>> {
    let mut points = Vec::new();
    for r in records {
        if r.name == "equivariance_error" {
            let alpha: f64 = r
                .context
                .get("alpha_hz")
                .ok_or_else(|| Error::Eval("sweep record without alpha_hz".into()))?
                .parse()
                .map_err(|_| Error::Eval("unparseable alpha_hz in sweep record".into()))?;
            points.push((alpha, r.value));
        }
    }
    if points.is_empty() {
        return Ok(None);
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(Some(ChartSpec {
        title: "equivariance error vs cutoff".into(),
        x_label: "cutoff (Hz)".into(),
        y_label: "relative error".into(),
        series: vec![Series { label: "rebottleneck".into(), points }],
        draw_lines: true,
    }))
}

struct Stored {
    records: Option<Vec<MetricRecord>>,
    curves: Option<Vec<AblationCurve>>,
    correlations: Vec<(String, Array2<f64>)>,
    scatter: Option<Vec<ScatterPoint>>,
}

impl Stored {
    fn is_empty(&self) -> bool {
        self.records.is_none()
            && self.curves.is_none()
            && self.correlations.is_empty()
            && self.scatter.is_none()
    }
}

fn read_json_opt(path: &Path) -> Result<Option<serde_json::Value>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn load_stored(dir: &Path) -> Result<Stored> {
    let records = match read_json_opt(&dir.join("metrics.json"))? {
        Some(v) => {
            let list = v
                .get("records")
                .cloned()
                .ok_or_else(|| Error::Eval(format!("{}: metrics.json has no records", dir.display())))?;
            Some(serde_json::from_value(list)?)
        }
        None => None,
    };

    let curves = match read_json_opt(&dir.join("ablation.json"))? {
        Some(v) => Some(serde_json::from_value(v)?),
        None => None,
    };

    let mut correlations = Vec::new();
    if let Some(v) = read_json_opt(&dir.join("correlation.json"))? {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Eval("correlation.json is not an object".into()))?;
        for (key, value) in obj {
            if key == "kind" {
                continue;
            }
            let rows: Vec<Vec<f64>> = serde_json::from_value(value.clone())?;
            let r = rows.len();
            let c = rows.first().map_or(0, Vec::len);
            if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
                return Err(Error::Eval(format!("correlation.json: {key} is not rectangular")));
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let m = Array2::from_shape_vec((r, c), flat)
                .map_err(|e| Error::Eval(format!("correlation.json: {e}")))?;
            correlations.push((key.clone(), m));
        }
    }

    let scatter = match std::fs::read_to_string(dir.join("scatter.csv")) {
        Ok(text) => Some(parse_scatter_csv(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };

    Ok(Stored { records, curves, correlations, scatter })
}

fn parse_scatter_csv(text: &str) -> Result<Vec<ScatterPoint>> {
    let mut points = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, ',');
        let bad = || Error::Eval(format!("scatter.csv: bad row {line:?}"));
        let x: f64 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let y: f64 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let label = fields.next().ok_or_else(bad)?.to_string();
        points.push(ScatterPoint { x, y, label });
    }
    Ok(points)
}

pub fn run(args: ExportArgs) -> Result<()> {
    args.common.check_device()?;
    let stored = load_stored(&args.metrics)?;
    if stored.is_empty() {
        return Err(Error::Eval(format!(
            "no stored metrics in {} (expected metrics.json, ablation.json, correlation.json, or scatter.csv)",
            args.metrics.display()
        )));
    }

    write_snapshot(
        &args.common,
        "export",
        None,
        serde_json::Value::Null,
        &[
            ("metrics", serde_json::json!(args.metrics)),
            ("format", serde_json::json!(args.format.name())),
        ],
    )?;

    let out = &args.common.out;
    let mut written = Vec::new();
    match args.format {
        Format::Csv => {
            if let Some(records) = &stored.records {
                let path = out.join("metrics.csv");
                write_metrics_csv(&path, records)?;
                written.push(path);
            }
            if let Some(curves) = &stored.curves {
                let path = out.join("ablation.csv");
                write_ablation_csv(&path, curves)?;
                written.push(path);
            }
            for (name, m) in &stored.correlations {
                let path = out.join(format!("corr_{name}.csv"));
                let mut text = String::new();
                for row in m.outer_iter() {
                    let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                    text.push_str(&cells.join(","));
                    text.push('\n');
                }
                std::fs::write(&path, text)?;
                written.push(path);
            }
        }
        Format::Svg | Format::Png => {
            let ext = args.format.name();
            let png = args.format == Format::Png;
            let chart = |path: PathBuf, spec: &ChartSpec| -> Result<PathBuf> {
                if png {
                    write_line_chart_png(&path, spec)?;
                } else {
                    write_line_chart_svg(&path, spec)?;
                }
                Ok(path)
            };
            if let Some(curves) = &stored.curves {
                for metric in [AblationMetric::Stft, AblationMetric::Mel, AblationMetric::Sisdr] {
                    let spec = ablation_chart(curves, metric)?;
                    written.push(chart(out.join(format!("ablation_{}.{ext}", metric.name())), &spec)?);
                }
            }
            if let Some(records) = &stored.records {
                if let Some(spec) = equivariance_chart(records)? {
                    written.push(chart(out.join(format!("equivariance.{ext}")), &spec)?);
                }
            }
            if let Some(points) = &stored.scatter {
                let spec = rebot_core::evalsuite::export::scatter_chart("pooled inner latents, top-2 PCA", points)?;
                written.push(chart(out.join(format!("scatter.{ext}")), &spec)?);
            }
            for (name, m) in &stored.correlations {
                let path = out.join(format!("corr_{name}.{ext}"));
                let title = format!("{name} latent correlation");
                if png {
                    write_heatmap_png(&path, &title, m)?;
                } else {
                    write_heatmap_svg(&path, &title, m)?;
                }
                written.push(path);
            }
        }
    }

    if written.is_empty() {
        return Err(Error::Eval(format!(
            "nothing in {} renders as {}",
            args.metrics.display(),
            args.format.name()
        )));
    }
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
