//! Frozen-latent cache: every dataset item encoded once by the base codec,
//! plus per-channel standardization statistics computed on the train split
//! only. Caches are keyed to the base checkpoint hash; mixing latents from
//! different base codecs is refused rather than silently tolerated.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use sha2::{Digest, Sha256};

use crate::codec::{FrozenBaseCodec, Latent};
use crate::datagen::{Split, WaveformDataset};
use crate::error::{Error, Result};
use crate::io::{load_archive, save_archive};
use crate::nn::hex;

/// Floor applied to per-channel standard deviations so degenerate channels
/// standardize to zero instead of NaN.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl ChannelStats {
    /// Population statistics per channel over the time axis of every given
    /// latent, with the std floor applied.
    pub fn from_latents<'a>(latents: impl Iterator<Item = &'a Array2<f64>>, channels: usize) -> Self {
        let mut sum = Array1::<f64>::zeros(channels);
        let mut sum_sq = Array1::<f64>::zeros(channels);
        let mut count = 0usize;
        for z in latents {
            assert_eq!(z.shape()[0], channels, "latent channel count");
            for (c, row) in z.axis_iter(Axis(0)).enumerate() {
                for &v in row {
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            count += z.shape()[1];
        }
        let n = count.max(1) as f64;
        let mean = &sum / n;
        let std = sum_sq
            .iter()
            .zip(mean.iter())
            .map(|(&sq, &m)| ((sq / n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
            .collect::<Array1<f64>>();
        Self { mean, std }
    }

    pub fn standardize(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        out
    }

    pub fn unstandardize(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * self.std[c] + self.mean[c]);
        }
        out
    }
}

pub struct LatentCache {
    pub base_hash: String,
    pub stats: ChannelStats,
    items: BTreeMap<String, Latent>,
}

/// Encodes every item with the frozen codec. Deterministic, so a re-run
/// produces an identical cache.
pub fn precompute_latents(codec: &FrozenBaseCodec, ds: &WaveformDataset) -> Result<LatentCache> {
    if ds.is_empty() {
        return Err(Error::Config("latent cache: empty dataset".into()));
    }
    let mut items = BTreeMap::new();
    for idx in 0..ds.len() {
        let w = ds.waveform(idx)?;
        let z = codec.encode(&w)?;
        items.insert(ds.items[idx].meta.id.clone(), z);
    }
    let channels = codec.config().latent_channels;
    let train_ids: Vec<&str> = ds
        .split_indices(Split::Train)
        .into_iter()
        .map(|i| ds.items[i].meta.id.as_str())
        .collect();
    let stats = if train_ids.is_empty() {
        ChannelStats::from_latents(items.values().map(|l| &l.values), channels)
    } else {
        ChannelStats::from_latents(train_ids.iter().map(|id| &items[*id].values), channels)
    };
    codec.assert_frozen()?;
    Ok(LatentCache { base_hash: codec.param_checksum().to_string(), stats, items })
}

fn item_file_name(id: &str) -> String {
    let sanitized: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let digest = hex(&Sha256::digest(id.as_bytes()));
    format!("{sanitized}-{}.rbck", &digest[..8])
}

impl LatentCache {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(|s| s.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Latent> {
        self.items.get(id)
    }

    /// Standardized `C x T` latent for `id` using the train-split stats.
    pub fn standardized(&self, id: &str) -> Option<Array2<f64>> {
        self.items.get(id).map(|l| self.stats.standardize(&l.values))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let stats_path = dir.join("stats.rbck");
        if stats_path.exists() {
            let existing = load_archive(&stats_path)?;
            let found = existing.manifest["base_hash"].as_str().unwrap_or("").to_string();
            if found != self.base_hash {
                return Err(Error::Cache(format!(
                    "refusing to mix caches: {} holds latents for base {}, this codec is {}",
                    dir.display(),
                    &found[..12.min(found.len())],
                    &self.base_hash[..12]
                )));
            }
        }
        std::fs::create_dir_all(dir.join("items"))?;
        let manifest = serde_json::json!({
            "format_version": 1,
            "kind": "latent_cache_stats",
            "base_hash": self.base_hash,
            "count": self.items.len(),
        });
        let tensors = vec![
            ("mean".to_string(), self.stats.mean.clone().into_dyn()),
            ("std".to_string(), self.stats.std.clone().into_dyn()),
        ];
        save_archive(&stats_path, &manifest, &tensors)?;
        for (id, latent) in &self.items {
            let manifest = serde_json::json!({
                "format_version": 1,
                "kind": "latent_item",
                "base_hash": self.base_hash,
                "id": id,
                "orig_len": latent.orig_len,
                "frame_rate": latent.frame_rate,
            });
            let tensors = vec![("z".to_string(), latent.values.clone().into_dyn())];
            save_archive(&dir.join("items").join(item_file_name(id)), &manifest, &tensors)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, expected_base_hash: &str) -> Result<Self> {
        let stats_path = dir.join("stats.rbck");
        let stats_archive = load_archive(&stats_path)
            .map_err(|e| Error::Cache(format!("{}: no usable cache ({e})", dir.display())))?;
        let base_hash = stats_archive.manifest["base_hash"].as_str().unwrap_or("").to_string();
        if base_hash != expected_base_hash {
            return Err(Error::Cache(format!(
                "cache at {} was built for base {}, current base is {}",
                dir.display(),
                &base_hash[..12.min(base_hash.len())],
                &expected_base_hash[..12.min(expected_base_hash.len())]
            )));
        }
        let mean = stats_archive.tensors["mean"].clone().into_dimensionality().expect("mean rank 1");
        let std = stats_archive.tensors["std"].clone().into_dimensionality().expect("std rank 1");
        let mut items = BTreeMap::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir.join("items"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        paths.sort();
        for path in paths {
            let a = load_archive(&path)?;
            if a.manifest["base_hash"].as_str().unwrap_or("") != expected_base_hash {
                return Err(Error::Cache(format!("{}: item from a different base codec", path.display())));
            }
            let id = a.manifest["id"].as_str().ok_or_else(|| Error::Cache("item without id".into()))?.to_string();
            let values = a.tensors["z"].clone().into_dimensionality().expect("latent rank 2");
            items.insert(
                id,
                Latent {
                    values,
                    frame_rate: a.manifest["frame_rate"].as_f64().unwrap_or(0.0),
                    orig_len: a.manifest["orig_len"].as_u64().unwrap_or(0) as usize,
                },
            );
        }
        let declared = stats_archive.manifest["count"].as_u64().unwrap_or(0) as usize;
        if items.len() != declared {
            return Err(Error::Cache(format!(
                "cache at {} holds {} items, stats file declares {declared}",
                dir.display(),
                items.len()
            )));
        }
        Ok(Self { base_hash, stats: ChannelStats { mean, std }, items })
    }
}
