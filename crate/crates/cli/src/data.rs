//! `rebot data`: renders a dataset manifest. Synthetic items stay lazy
//! (seed plus duration per item); WAV ingestion records file paths.

use std::path::PathBuf;

use clap::Args;
use rebot_core::datagen::{load_wav_dir, synth_dataset, Split, SynthSpec};
use rebot_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::{read_config, write_snapshot, CommonArgs};

#[derive(Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Ingest WAV files from this directory instead of synthesizing.
    #[arg(long)]
    pub wav_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DataConfig {
    #[serde(default)]
    seed: u64,
    #[serde(flatten)]
    spec: SynthSpec,
}

pub fn run(args: DataArgs) -> Result<()> {
    args.common.check_device()?;

    let mut cfg = match &args.common.config {
        Some(path) => Some(read_config::<DataConfig>(path)?),
        None => None,
    };
    let seed = args.common.seed.unwrap_or_else(|| cfg.as_ref().map_or(0, |c| c.seed));
    if let Some(c) = cfg.as_mut() {
        c.seed = seed;
    }

    let (ds, skipped) = if let Some(dir) = &args.wav_dir {
        let target_sr = cfg.as_ref().map_or(16_000, |c| c.spec.sample_rate);
        load_wav_dir(dir, target_sr)?
    } else {
        let cfg = cfg.as_ref().ok_or_else(|| {
            Error::Config("data: --config is required unless --wav-dir is given".into())
        })?;
        (synth_dataset(&cfg.spec, seed)?, Vec::new())
    };
    ds.validate()?;

    std::fs::create_dir_all(&args.common.out)?;
    let manifest = args.common.out.join("manifest.json");
    ds.save_manifest(&manifest)?;

    let resolved = match &cfg {
        Some(c) => serde_json::to_value(c)?,
        None => serde_json::Value::Null,
    };
    write_snapshot(
        &args.common,
        "data",
        Some(seed),
        resolved,
        &[("wav_dir", serde_json::json!(args.wav_dir))],
    )?;

    for name in &skipped {
        eprintln!("skipped {name}");
    }
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| ds.split_indices(s).len());
    println!(
        "manifest: {} ({} items; {} train / {} val / {} test)",
        manifest.display(),
        ds.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}
