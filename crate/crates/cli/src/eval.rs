//! `rebot eval`: runs one metric suite against a trained checkpoint and
//! stores the results as `metrics.csv`/`metrics.json` plus suite-specific
//! tables and figures.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ndarray::Array2;
use rebot_core::codec::{FrozenBaseCodec, Latent};
use rebot_core::datagen::{Split, WaveformDataset};
use rebot_core::evalsuite::export::{
    ablation_chart, scatter_chart, write_ablation_csv, write_heatmap_png, write_heatmap_svg,
    write_line_chart_png, write_line_chart_svg, write_metrics_csv, write_metrics_json,
    AblationMetric,
};
use rebot_core::evalsuite::recon::{mel_distance, sisdr, stft_distance};
use rebot_core::evalsuite::similarity::{correlation_matrix, mean_abs_offdiag};
use rebot_core::evalsuite::studies::{
    alignment_report, channel_ablation_curve, equivariance_error_sweep, filtered_decode_eval,
    pooled_scatter,
};
use rebot_core::evalsuite::{AblationStrategy, MetricRecord};
use rebot_core::trainer::{load_model, ReModel};
use rebot_core::variants::semantic::MelStatsEncoder;
use rebot_core::variants::Variant;
use rebot_core::{Error, Result};

use crate::{write_snapshot, CommonArgs};

/// Cutoffs for the equivariance suite, spanning the synthetic corpus band.
pub const EVAL_ALPHAS: [f64; 3] = [500.0, 1000.0, 2000.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Channel-ablation curves; needs an ordered checkpoint.
    Ordering,
    /// CKA/PWCCA alignment plus a pooled-latent scatter map.
    Alignment,
    /// Commutation error and filtered decodes; needs an equivariant checkpoint.
    Equivariance,
    /// Roundtrip quality and latent correlation structure.
    Recon,
}

impl Suite {
    fn name(&self) -> &'static str {
        match self {
            Suite::Ordering => "ordering",
            Suite::Alignment => "alignment",
            Suite::Equivariance => "equivariance",
            Suite::Recon => "recon",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Re-Bottleneck checkpoint (.rbck).
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Frozen base codec the checkpoint was trained against.
    #[arg(long)]
    pub base: PathBuf,

    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,

    /// Which suite to run.
    #[arg(long, value_enum)]
    pub suite: Suite,

    /// Dataset split to evaluate on.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

pub fn run(args: EvalArgs) -> Result<()> {
    args.common.check_device()?;
    let codec = FrozenBaseCodec::load(&args.base)?;
    let model = load_model(&args.checkpoint)?;
    model.require_base(&codec)?;

    let full = WaveformDataset::load_manifest(&args.data)?;
    let ds = filter_split(&full, args.split);
    if ds.items.is_empty() {
        return Err(Error::Eval(format!(
            "no items in the requested split ({} total in manifest)",
            full.len()
        )));
    }
    let seed = args.common.seed.unwrap_or(model.config.seed);

    write_snapshot(
        &args.common,
        "eval",
        Some(seed),
        serde_json::to_value(&model.config)?,
        &[
            ("checkpoint", serde_json::json!(args.checkpoint)),
            ("base", serde_json::json!(args.base)),
            ("data", serde_json::json!(args.data)),
            ("suite", serde_json::json!(args.suite.name())),
            ("eval_split", serde_json::json!(format!("{:?}", args.split).to_lowercase())),
        ],
    )?;

    let out = &args.common.out;
    let records = match args.suite {
        Suite::Ordering => suite_ordering(&model, &codec, &ds, out, seed)?,
        Suite::Alignment => suite_alignment(&model, &codec, &ds, out)?,
        Suite::Equivariance => suite_equivariance(&model, &codec, &ds, out)?,
        Suite::Recon => suite_recon(&model, &codec, &ds, out)?,
    };

    write_metrics_csv(&out.join("metrics.csv"), &records)?;
    write_metrics_json(&out.join("metrics.json"), &records)?;
    println!(
        "{} suite on {} items: {} records -> {}",
        args.suite.name(),
        ds.len(),
        records.len(),
        out.join("metrics.json").display()
    );
    Ok(())
}

fn filter_split(full: &WaveformDataset, split: SplitArg) -> WaveformDataset {
    let keep = |s: Split| match split {
        SplitArg::Train => s == Split::Train,
        SplitArg::Val => s == Split::Val,
        SplitArg::Test => s == Split::Test,
        SplitArg::All => true,
    };
    WaveformDataset {
        sample_rate: full.sample_rate,
        items: full.items.iter().filter(|it| keep(it.meta.split)).cloned().collect(),
    }
}

fn suite_ordering(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    ds: &WaveformDataset,
    out: &Path,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    model.require_variant(Variant::Ordered)?;
    let mut curves = Vec::new();
    for strategy in AblationStrategy::ALL {
        curves.push(channel_ablation_curve(model, codec, ds, strategy, seed)?);
    }
    write_ablation_csv(&out.join("ablation.csv"), &curves)?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&curves)? + "\n")?;
    for metric in [AblationMetric::Stft, AblationMetric::Mel, AblationMetric::Sisdr] {
        let chart = ablation_chart(&curves, metric)?;
        write_line_chart_svg(&out.join(format!("ablation_{}.svg", metric.name())), &chart)?;
        write_line_chart_png(&out.join(format!("ablation_{}.png", metric.name())), &chart)?;
    }

    let mut records = Vec::new();
    for curve in &curves {
        for p in &curve.points {
            for (name, v) in [("ablation_stft", p.stft), ("ablation_mel", p.mel), ("ablation_sisdr", p.sisdr)] {
                records.push(
                    MetricRecord::new(name, v)?
                        .with("strategy", curve.strategy.name())
                        .with("m", p.m),
                );
            }
        }
    }
    Ok(records)
}

fn suite_alignment(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    ds: &WaveformDataset,
    out: &Path,
) -> Result<Vec<MetricRecord>> {
    let fsem = MelStatsEncoder::new(ds.sample_rate, model.config.semantic_dim, model.config.seed)?;
    let records = alignment_report(model, codec, &fsem, ds)?;

    let points = pooled_scatter(model, codec, ds)?;
    let mut table = String::from("x,y,label\n");
    for p in &points {
        table.push_str(&format!("{},{},{}\n", p.x, p.y, p.label));
    }
    std::fs::write(out.join("scatter.csv"), table)?;
    let chart = scatter_chart("pooled inner latents, top-2 PCA", &points)?;
    write_line_chart_svg(&out.join("scatter.svg"), &chart)?;
    write_line_chart_png(&out.join("scatter.png"), &chart)?;
    Ok(records)
}

fn suite_equivariance(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    ds: &WaveformDataset,
    out: &Path,
) -> Result<Vec<MetricRecord>> {
    model.require_variant(Variant::Equivariant)?;
    let mut records = equivariance_error_sweep(model, codec, ds, &EVAL_ALPHAS)?;
    for &alpha in &EVAL_ALPHAS {
        records.extend(filtered_decode_eval(model, codec, ds, alpha)?);
    }

    let chart = crate::export::equivariance_chart(&records)?
        .ok_or_else(|| Error::Eval("sweep produced no equivariance_error records".into()))?;
    write_line_chart_svg(&out.join("equivariance.svg"), &chart)?;
    write_line_chart_png(&out.join("equivariance.png"), &chart)?;
    Ok(records)
}

fn suite_recon(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    ds: &WaveformDataset,
    out: &Path,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    let mut base_frames = Vec::new();
    let mut inner_frames = Vec::new();
    for (idx, item) in ds.items.iter().enumerate() {
        let x = ds.waveform(idx)?;
        let z = codec.encode(&x)?;
        let base_hat = codec.decode(&z)?;
        let inner = model.encode_inner(&z.values)?;
        let values = model.decode_inner(&inner.values)?;
        let rebot_hat = codec.decode(&Latent { values, frame_rate: z.frame_rate, orig_len: z.orig_len })?;

        for (system, xhat) in [("base", &base_hat), ("rebottleneck", &rebot_hat)] {
            let a = x.samples.as_slice().expect("contiguous samples");
            let b = xhat.samples.as_slice().expect("contiguous samples");
            for (metric, v) in [
                ("stft", stft_distance(a, b)?),
                ("mel", mel_distance(a, b, x.sample_rate)?),
                ("sisdr", sisdr(a, b)?),
            ] {
                records.push(
                    MetricRecord::new(format!("{system}_{metric}"), v)?
                        .with("system", system)
                        .with("id", &item.meta.id),
                );
            }
        }
        base_frames.push(z.values);
        inner_frames.push(inner.values);
    }

    let (corr_base, warn_b) = correlation_matrix(&frames_matrix(&base_frames))?;
    let (corr_inner, warn_i) = correlation_matrix(&frames_matrix(&inner_frames))?;
    for w in warn_b.iter().chain(&warn_i) {
        eprintln!("warning: {w}");
    }
    records.push(MetricRecord::new("mean_abs_offdiag", mean_abs_offdiag(&corr_base))?.with("space", "base"));
    records.push(MetricRecord::new("mean_abs_offdiag", mean_abs_offdiag(&corr_inner))?.with("space", "inner"));

    write_heatmap_svg(&out.join("corr_base.svg"), "base latent correlation", &corr_base)?;
    write_heatmap_png(&out.join("corr_base.png"), "base latent correlation", &corr_base)?;
    write_heatmap_svg(&out.join("corr_inner.svg"), "inner latent correlation", &corr_inner)?;
    write_heatmap_png(&out.join("corr_inner.png"), "inner latent correlation", &corr_inner)?;

    let corr = serde_json::json!({
        "kind": "latent_correlation",
        "base": matrix_rows(&corr_base),
        "inner": matrix_rows(&corr_inner),
    });
    std::fs::write(out.join("correlation.json"), serde_json::to_string_pretty(&corr)? + "\n")?;
    Ok(records)
}

/// Stacks per-item `(channels, time)` latents into a samples-by-channels
/// matrix, one row per frame.
fn frames_matrix(latents: &[Array2<f64>]) -> Array2<f64> {
    let channels = latents.first().map_or(0, |z| z.shape()[0]);
    let total: usize = latents.iter().map(|z| z.shape()[1]).sum();
    let mut out = Array2::zeros((total, channels));
    let mut row = 0;
    for z in latents {
        for t in 0..z.shape()[1] {
            out.row_mut(row).assign(&z.column(t));
            row += 1;
        }
    }
    out
}

fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}
