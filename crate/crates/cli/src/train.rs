//! `rebot train`: fits either the toy base codec (`base`) or a
//! Re-Bottleneck variant inside a frozen one (`rebottleneck`).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Subcommand};
use rebot_core::cache::{precompute_latents, LatentCache};
use rebot_core::codec::{train_toy_base, BaseCodecConfig, FrozenBaseCodec};
use rebot_core::datagen::WaveformDataset;
use rebot_core::io::JsonlWriter;
use rebot_core::trainer::{TrainConfig, Trainer};
use rebot_core::variants::semantic::{MelStatsEncoder, SemanticEncoder};
use rebot_core::variants::Variant;
use rebot_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{read_config, write_snapshot, CommonArgs};

#[derive(Subcommand)]
pub enum TrainCmd {
    /// Train the toy base VAE and freeze it into a codec archive.
    Base(BaseArgs),
    /// Train a Re-Bottleneck inside a frozen base codec.
    Rebottleneck(RebotArgs),
}

pub fn run(cmd: TrainCmd) -> Result<()> {
    match cmd {
        TrainCmd::Base(args) => run_base(args),
        TrainCmd::Rebottleneck(args) => run_rebottleneck(args),
    }
}

#[derive(Args)]
pub struct BaseArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Dataset manifest produced by `rebot data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct BaseTrainConfig {
    #[serde(default)]
    seed: u64,
    #[serde(flatten)]
    codec: BaseCodecConfig,
}

fn run_base(args: BaseArgs) -> Result<()> {
    args.common.check_device()?;
    let mut cfg: BaseTrainConfig = read_config(args.common.require_config()?)?;
    cfg.seed = args.common.seed.unwrap_or(cfg.seed);
    let ds = WaveformDataset::load_manifest(&args.data)?;

    write_snapshot(
        &args.common,
        "train base",
        Some(cfg.seed),
        serde_json::to_value(&cfg)?,
        &[("data", serde_json::json!(args.data))],
    )?;

    let t0 = Instant::now();
    let (codec, logs) = train_toy_base(&ds, &cfg.codec, cfg.seed)?;
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;

    let out = &args.common.out;
    codec.save(&out.join("base.rbck"), cfg.seed)?;
    let mut log = JsonlWriter::create(&out.join("epochs.jsonl"))?;
    for entry in &logs {
        log.write(entry)?;
    }
    let run = serde_json::json!({
        "kind": "base_run",
        "wall_ms": wall_ms,
        "epochs": logs.len(),
        "final_loss": logs.last().map(|l| l.total),
        "base_hash": codec.param_checksum(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(out.join("run_manifest.json"), serde_json::to_string_pretty(&run)? + "\n")?;

    println!(
        "base codec: {} (hash {}, {} epochs, {:.0} ms)",
        out.join("base.rbck").display(),
        &codec.param_checksum()[..16],
        logs.len(),
        wall_ms
    );
    Ok(())
}

#[derive(Args)]
pub struct RebotArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Dataset manifest produced by `rebot data`.
    #[arg(long)]
    pub data: PathBuf,

    /// Frozen base codec archive from `rebot train base`.
    #[arg(long)]
    pub base: PathBuf,

    /// Variant override: plain | ordered | semantic | equivariant. Also
    /// resets the task weight to the variant's default.
    #[arg(long)]
    pub variant: Option<String>,

    /// Resume from this checkpoint; its stored config wins over --config.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    /// Training horizon override, mainly to extend a resumed run.
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn run_rebottleneck(args: RebotArgs) -> Result<()> {
    args.common.check_device()?;
    let fresh_cfg = if args.resume.is_some() {
        None
    } else {
        let mut cfg: TrainConfig = read_config(args.common.require_config()?)?;
        if let Some(name) = &args.variant {
            let variant = Variant::parse(name)?;
            cfg.variant = variant;
            cfg.weights.task = variant.default_task_weight();
        }
        if let Some(seed) = args.common.seed {
            cfg.seed = seed;
        }
        Some(cfg)
    };

    let codec = FrozenBaseCodec::load(&args.base)?;
    let ds = WaveformDataset::load_manifest(&args.data)?;
    let (cache, cache_dir) = obtain_cache(&codec, &ds)?;

    let mut trainer = match (&args.resume, fresh_cfg) {
        (Some(ckpt), _) => {
            let stored = peek_checkpoint_config(ckpt)?;
            let fsem = default_fsem(&stored, ds.sample_rate)?;
            Trainer::resume(ckpt, codec, &ds, &cache, fsem)?
        }
        (None, Some(cfg)) => {
            let fsem = default_fsem(&cfg, ds.sample_rate)?;
            Trainer::with_cache(cfg, codec, &ds, &cache, fsem)?
        }
        (None, None) => unreachable!("fresh config is built when not resuming"),
    };
    if let Some(epochs) = args.epochs {
        trainer.set_epochs(epochs)?;
    }

    write_snapshot(
        &args.common,
        "train rebottleneck",
        Some(trainer.config().seed),
        serde_json::to_value(trainer.config())?,
        &[
            ("data", serde_json::json!(args.data)),
            ("base", serde_json::json!(args.base)),
            ("resume", serde_json::json!(args.resume)),
            ("latent_cache", serde_json::json!(cache_dir)),
        ],
    )?;

    let summary = trainer.fit(&args.common.out)?;
    println!(
        "{} rebottleneck: {} ({} steps, {:.0} ms)",
        trainer.config().variant.name(),
        summary.final_checkpoint.display(),
        summary.steps,
        summary.wall_ms
    );
    Ok(())
}

fn peek_checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let archive = rebot_core::io::load_archive(path)?;
    let value = archive
        .manifest
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("checkpoint manifest missing config".into()))?;
    Ok(serde_json::from_value(value)?)
}

/// The semantic target the trainer aligns to. Rebuilt from the config (not
/// stored in checkpoints), so resume and eval must derive it the same way.
pub fn default_fsem(cfg: &TrainConfig, sample_rate: u32) -> Result<Option<Box<dyn SemanticEncoder>>> {
    Ok(match cfg.variant {
        Variant::Semantic => Some(Box::new(MelStatsEncoder::new(
            sample_rate,
            cfg.semantic_dim,
            cfg.seed,
        )?)),
        _ => None,
    })
}

/// Latent caching policy: with `REBOT_CACHE_DIR` set, caches live under a
/// key derived from the codec parameters and the dataset items, so a reused
/// directory can never serve stale latents. Without it, latents are
/// computed in memory for this run only.
pub fn obtain_cache(codec: &FrozenBaseCodec, ds: &WaveformDataset) -> Result<(LatentCache, Option<PathBuf>)> {
    let Some(root) = std::env::var_os("REBOT_CACHE_DIR") else {
        return Ok((precompute_latents(codec, ds)?, None));
    };
    let dir = PathBuf::from(root).join(cache_key(codec, ds)?);
    match LatentCache::load(&dir, codec.param_checksum()) {
        Ok(cache) => {
            eprintln!("latent cache hit: {}", dir.display());
            Ok((cache, Some(dir)))
        }
        Err(_) => {
            let cache = precompute_latents(codec, ds)?;
            cache.save(&dir)?;
            eprintln!("latent cache written: {}", dir.display());
            Ok((cache, Some(dir)))
        }
    }
}

fn cache_key(codec: &FrozenBaseCodec, ds: &WaveformDataset) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(codec.param_checksum().as_bytes());
    hasher.update(ds.sample_rate.to_le_bytes());
    hasher.update(serde_json::to_vec(&ds.items)?);
    let digest = hasher.finalize();
    let mut key = String::with_capacity(24);
    for byte in digest.iter().take(12) {
        key.push_str(&format!("{byte:02x}"));
    }
    Ok(key)
}
