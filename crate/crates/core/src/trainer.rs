//! Adversarial training of the Re-Encoder inside a frozen base codec,
//! with variant-specific task losses, epoch checkpoints, and bitwise
//! resumability. Latents are standardized with train-split statistics;
//! everything the re-encoder and discriminator see lives in that space,
//! and the stats travel with every checkpoint so evaluation can undo it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Tape};
use crate::cache::{precompute_latents, ChannelStats, LatentCache};
use crate::codec::FrozenBaseCodec;
use crate::datagen::{mix_seed, Split, WaveformDataset};
use crate::discriminator::{DiscConfig, Discriminator};
use crate::dsp::filter::{sample_cutoff, LatentFilter};
use crate::dsp::stft::Stft;
use crate::error::{Error, Result};
use crate::io::archive::{load_archive, save_archive, Archive};
use crate::io::jsonl::JsonlWriter;
use crate::losses::{
    disc_adv_loss, feature_matching_loss, gen_adv_loss, kl_loss, latent_recon_loss,
    total_generator_loss, GenLossTerms, LossReport, LossWeights,
};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::reencoder::{InnerLatent, Reencoder, ReencoderConfig};
use crate::variants::semantic::{semantic_task_loss, SemanticEncoder, SemanticProbe};
use crate::variants::{apply_mask_fraction, batch_mask_tensor, Variant};
use crate::audio::Waveform;

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;
const EPOCH_SALT: u64 = 0x45504F43;
const PROBE_SALT: u64 = 0x50524F42;
/// STFT used for the waveform-domain Gaussian filter during training.
const FILTER_FFT: usize = 1024;
const FILTER_HOP: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub weights: LossWeights,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub batch_size: usize,
    pub chunk_seconds: f64,
    pub epochs: usize,
    pub seed: u64,
    pub reencoder: ReencoderConfig,
    pub discriminator: DiscConfig,
    /// Ordered: share of each batch that gets a nested mask.
    pub mask_fraction: f64,
    /// Semantic: InfoNCE temperature and target dimension H.
    pub temperature: f64,
    pub semantic_dim: usize,
    /// Equivariant: log-uniform cutoff range in Hz.
    pub alpha_min_hz: f64,
    pub alpha_max_hz: f64,
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            weights: LossWeights::with_task(variant.default_task_weight()),
            lr_generator: 5e-4,
            lr_discriminator: 1e-4,
            batch_size: 8,
            chunk_seconds: 2.048,
            epochs: 12,
            seed: 0,
            reencoder: ReencoderConfig::default(),
            discriminator: DiscConfig::default(),
            mask_fraction: 0.75,
            temperature: 0.07,
            semantic_dim: 32,
            alpha_min_hz: 500.0,
            alpha_max_hz: 8000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_generator <= 0.0 || self.lr_discriminator <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.chunk_seconds > 0.0) {
            return Err(Error::Config("chunk_seconds must be positive".into()));
        }
        self.weights.validate()?;
        self.reencoder.validate()?;
        self.discriminator.validate()?;
        match self.variant {
            Variant::Plain | Variant::Ordered => {
                if self.weights.task != 0.0 {
                    return Err(Error::Config(format!(
                        "variant {} takes no task loss but task weight is {}",
                        self.variant.name(),
                        self.weights.task
                    )));
                }
            }
            Variant::Semantic => {
                if !(self.temperature > 0.0) {
                    return Err(Error::Config("temperature must be positive".into()));
                }
                if self.semantic_dim == 0 {
                    return Err(Error::Config("semantic_dim must be >= 1".into()));
                }
            }
            Variant::Equivariant => {
                if !(self.alpha_min_hz > 0.0 && self.alpha_min_hz <= self.alpha_max_hz) {
                    return Err(Error::Config(format!(
                        "invalid cutoff range [{}, {}]",
                        self.alpha_min_hz, self.alpha_max_hz
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::Config(format!("mask fraction {} outside [0, 1]", self.mask_fraction)));
        }
        Ok(())
    }
}

/// One step's log record. `wall_ms` is the only non-deterministic field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossReport,
    pub disc: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub wall_ms: f64,
}

struct TrainChunk {
    /// Standardized clean latent, `(C, T_c)`.
    z_std: Array2<f64>,
    /// Pooled semantic target for this chunk's audio window.
    pooled_target: Option<Array1<f64>>,
    /// Clean waveform window, kept for on-the-fly filtered encoding.
    wave: Option<Array1<f64>>,
}

/// A fully assembled training batch; build one with
/// [`Trainer::assemble_batch`].
pub struct Batch {
    z: Array3<f64>,
    eps: Arr,
    mask: Option<Arr>,
    targets: Option<Array2<f64>>,
    z_filt: Option<Array3<f64>>,
    latent_gains: Option<Arr>,
}

pub struct Trainer {
    cfg: TrainConfig,
    codec: FrozenBaseCodec,
    fsem: Option<Box<dyn SemanticEncoder>>,
    fsem_hash: Option<String>,
    reenc: Reencoder,
    disc: Discriminator,
    probe: Option<SemanticProbe>,
    probe_store: ParamStore,
    adam_g: Adam,
    adam_d: Adam,
    adam_p: Adam,
    stats: ChannelStats,
    base_hash: String,
    chunks: Vec<TrainChunk>,
    frames_per_chunk: usize,
    stft: Stft,
    step: u64,
    epochs_done: usize,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(1e-300);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Arr::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

fn stack_latents(slices: &[&Array2<f64>]) -> Array3<f64> {
    let (c, t) = (slices[0].shape()[0], slices[0].shape()[1]);
    let mut out = Array3::zeros((slices.len(), c, t));
    for (i, s) in slices.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(s);
    }
    out
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        codec: FrozenBaseCodec,
        ds: &WaveformDataset,
        fsem: Option<Box<dyn SemanticEncoder>>,
    ) -> Result<Self> {
        let cache = precompute_latents(&codec, ds)?;
        Self::with_cache(cfg, codec, ds, &cache, fsem)
    }

    pub fn with_cache(
        cfg: TrainConfig,
        codec: FrozenBaseCodec,
        ds: &WaveformDataset,
        cache: &LatentCache,
        fsem: Option<Box<dyn SemanticEncoder>>,
    ) -> Result<Self> {
        cfg.validate()?;
        codec.assert_frozen()?;
        if cache.base_hash != codec.param_checksum() {
            return Err(Error::Cache("latent cache was built with a different base codec".into()));
        }
        let ccfg = codec.config();
        if cfg.reencoder.in_channels != ccfg.latent_channels {
            return Err(Error::ChannelMismatch { expected: ccfg.latent_channels, got: cfg.reencoder.in_channels });
        }
        if cfg.discriminator.in_channels != ccfg.latent_channels {
            return Err(Error::ChannelMismatch { expected: ccfg.latent_channels, got: cfg.discriminator.in_channels });
        }
        if ds.sample_rate != ccfg.sample_rate {
            return Err(Error::SampleRate { expected: ccfg.sample_rate, got: ds.sample_rate });
        }

        let fsem_hash = match (cfg.variant, &fsem) {
            (Variant::Semantic, Some(enc)) => {
                if enc.dim() != cfg.semantic_dim {
                    return Err(Error::Config(format!(
                        "semantic encoder dim {} != configured semantic_dim {}",
                        enc.dim(),
                        cfg.semantic_dim
                    )));
                }
                Some(enc.checksum())
            }
            (Variant::Semantic, None) => {
                return Err(Error::Config("semantic variant requires a semantic encoder".into()));
            }
            _ => None,
        };

        let chunk_len = (cfg.chunk_seconds * ccfg.sample_rate as f64).round() as usize;
        if chunk_len == 0 || chunk_len % ccfg.downsample != 0 {
            return Err(Error::Config(format!(
                "chunk of {chunk_len} samples is not a positive multiple of the {}-sample hop",
                ccfg.downsample
            )));
        }
        let frames_per_chunk = chunk_len / ccfg.downsample;
        let stft = Stft::new(FILTER_FFT.min(chunk_len.next_power_of_two()), FILTER_HOP.min(chunk_len / 4).max(1));

        let mut train_indices = ds.split_indices(Split::Train);
        if train_indices.is_empty() {
            train_indices = (0..ds.len()).collect();
        }

        let mut chunks = Vec::new();
        for idx in train_indices {
            let item = &ds.items[idx];
            let len = ds.item_len(idx)?;
            let n_windows = len / chunk_len;
            if n_windows == 0 {
                continue;
            }
            let need_audio = matches!(cfg.variant, Variant::Semantic | Variant::Equivariant);
            let wav = if need_audio { Some(ds.waveform(idx)?) } else { None };
            for k in 0..n_windows {
                let (s0, s1) = (k * chunk_len, (k + 1) * chunk_len);
                let window = wav.as_ref().map(|w| w.samples.slice(ndarray::s![s0..s1]).to_owned());
                let z_std = match cfg.variant {
                    // The filtered branch encodes isolated windows, so the
                    // clean branch must too; full-item latents would differ
                    // at window borders from conv padding.
                    Variant::Equivariant => {
                        let w = Waveform { samples: window.clone().unwrap(), sample_rate: ds.sample_rate };
                        cache.stats.standardize(&codec.encode(&w)?.values)
                    }
                    _ => {
                        let z = cache
                            .get(&item.meta.id)
                            .ok_or_else(|| Error::Cache(format!("no cached latent for {}", item.meta.id)))?;
                        let (f0, f1) = (s0 / ccfg.downsample, s1 / ccfg.downsample);
                        cache.stats.standardize(&z.values.slice(ndarray::s![.., f0..f1]).to_owned())
                    }
                };
                let pooled_target = match (cfg.variant, &fsem) {
                    (Variant::Semantic, Some(enc)) => {
                        let seg = window.as_ref().unwrap();
                        Some(enc.embed(&item.meta, seg.as_slice().unwrap(), ds.sample_rate)?.pooled)
                    }
                    _ => None,
                };
                chunks.push(TrainChunk {
                    z_std,
                    pooled_target,
                    wave: if cfg.variant == Variant::Equivariant { window } else { None },
                });
            }
        }
        if chunks.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "{} full training chunks but batch size is {}",
                chunks.len(),
                cfg.batch_size
            )));
        }

        let reenc = Reencoder::new(cfg.reencoder.clone(), cfg.seed)?;
        let disc = Discriminator::new(cfg.discriminator.clone(), cfg.seed)?;
        let mut probe_store = ParamStore::new();
        let probe = if cfg.variant == Variant::Semantic {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, PROBE_SALT));
            Some(SemanticProbe::new(&mut probe_store, &mut rng, cfg.reencoder.inner_channels, cfg.semantic_dim))
        } else {
            None
        };

        let adam_g = Adam::new(&reenc.params, AdamConfig::with_lr(cfg.lr_generator));
        let adam_d = Adam::new(&disc.params, AdamConfig::with_lr(cfg.lr_discriminator));
        let adam_p = Adam::new(&probe_store, AdamConfig::with_lr(cfg.lr_generator));

        Ok(Self {
            base_hash: codec.param_checksum().to_string(),
            stats: cache.stats.clone(),
            cfg,
            codec,
            fsem,
            fsem_hash,
            reenc,
            disc,
            probe,
            probe_store,
            adam_g,
            adam_d,
            adam_p,
            chunks,
            frames_per_chunk,
            stft,
            step: 0,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Extends (or confirms) the training horizon, typically after a resume.
    /// The schedule derives each epoch's rng from `(seed, epoch)`, so moving
    /// the end point does not disturb epochs already run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs < self.epochs_done {
            return Err(Error::Config(format!(
                "cannot set horizon to {epochs} epochs, {} are already done",
                self.epochs_done
            )));
        }
        self.cfg.epochs = epochs;
        Ok(())
    }

    pub fn codec(&self) -> &FrozenBaseCodec {
        &self.codec
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn assemble_batch(&self, ids: &[usize], rng: &mut ChaCha8Rng) -> Result<Batch> {
        let cfg = &self.cfg;
        let (cp, tc) = (cfg.reencoder.inner_channels, self.frames_per_chunk);
        let z = stack_latents(&ids.iter().map(|&i| &self.chunks[i].z_std).collect::<Vec<_>>());
        let eps = if cfg.reencoder.variational {
            randn(rng, &[ids.len(), cp, tc])
        } else {
            Arr::zeros(ndarray::IxDyn(&[ids.len(), cp, tc]))
        };

        let mask = if cfg.variant == Variant::Ordered {
            let assignment = apply_mask_fraction(ids.len(), cfg.mask_fraction, cp, rng)?;
            Some(batch_mask_tensor(&assignment, cp, tc))
        } else {
            None
        };

        let targets = if cfg.variant == Variant::Semantic {
            let mut m = Array2::zeros((ids.len(), cfg.semantic_dim));
            for (row, &i) in ids.iter().enumerate() {
                m.row_mut(row).assign(self.chunks[i].pooled_target.as_ref().unwrap());
            }
            Some(m)
        } else {
            None
        };

        let (z_filt, latent_gains) = if cfg.variant == Variant::Equivariant {
            let sr = self.codec.config().sample_rate;
            let mut zf = Vec::with_capacity(ids.len());
            let mut gains = Array3::zeros((ids.len(), cp, 1));
            for (row, &i) in ids.iter().enumerate() {
                let alpha = sample_cutoff(rng, cfg.alpha_min_hz, cfg.alpha_max_hz)?;
                let lf = LatentFilter::new(alpha, cp, sr)?;
                for c in 0..cp {
                    gains[[row, c, 0]] = lf.gains[c];
                }
                let wave = self.chunks[i].wave.as_ref().unwrap();
                let gw = crate::dsp::filter::waveform_gains(&self.stft, sr, alpha)?;
                let filtered = self.stft.filter_zero_phase(wave.as_slice().unwrap(), &gw);
                let w = Waveform { samples: filtered.into(), sample_rate: sr };
                zf.push(self.stats.standardize(&self.codec.encode(&w)?.values));
            }
            (Some(stack_latents(&zf.iter().collect::<Vec<_>>())), Some(gains.into_dyn()))
        } else {
            (None, None)
        };

        Ok(Batch { z, eps, mask, targets, z_filt, latent_gains })
    }

    /// Decoder-input transform for the variant: nested mask or latent filter.
    fn shape_inner(tape: &mut Tape, zt: crate::autodiff::Var, batch: &Batch) -> crate::autodiff::Var {
        if let Some(mask) = &batch.mask {
            tape.mul_bcast_const(zt, mask)
        } else if let Some(gains) = &batch.latent_gains {
            tape.mul_bcast_const(zt, gains)
        } else {
            zt
        }
    }

    /// One discriminator update then one generator update.
    pub fn train_step(&mut self, batch: &Batch, epoch: usize) -> Result<StepRecord> {
        let t0 = Instant::now();
        let real_arr = match &batch.z_filt {
            Some(zf) => zf.clone().into_dyn(),
            None => batch.z.clone().into_dyn(),
        };

        // Detached generator forward; the same eps feeds the on-tape pass.
        let fake_arr = {
            let mut tape = Tape::new();
            let bind = self.reenc.params.bind(&mut tape, false);
            let zv = tape.constant(batch.z.clone().into_dyn());
            let (mu, lv) = self.reenc.encode_t(&mut tape, &bind, zv);
            let zt = Reencoder::reparam_t(&mut tape, mu, lv, &batch.eps);
            let shaped = Self::shape_inner(&mut tape, zt, batch);
            let zhat = self.reenc.decode_t(&mut tape, &bind, shaped);
            tape.value(zhat).clone()
        };

        let disc_loss = {
            let mut tape = Tape::new();
            let bind_d = self.disc.params.bind(&mut tape, true);
            let real = tape.constant(real_arr.clone());
            let fake = tape.constant(fake_arr);
            let out_real = self.disc.discriminate_t(&mut tape, &bind_d, real);
            let out_fake = self.disc.discriminate_t(&mut tape, &bind_d, fake);
            let loss = disc_adv_loss(&mut tape, out_real.score, out_fake.score)?;
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("discriminator loss at step {}", self.step + 1)));
            }
            let grads = tape.backward(loss);
            self.adam_d.update(&mut self.disc.params, &bind_d, &grads);
            v
        };

        let report = {
            let mut tape = Tape::new();
            let bind_g = self.reenc.params.bind(&mut tape, true);
            let bind_d = self.disc.params.bind(&mut tape, false);
            let bind_p = self.probe_store.bind(&mut tape, true);

            let zv = tape.constant(batch.z.clone().into_dyn());
            let (mu, lv) = self.reenc.encode_t(&mut tape, &bind_g, zv);
            let zt = Reencoder::reparam_t(&mut tape, mu, lv, &batch.eps);
            let shaped = Self::shape_inner(&mut tape, zt, batch);
            let zhat = self.reenc.decode_t(&mut tape, &bind_g, shaped);

            let target = tape.constant(real_arr.clone());
            let rec = latent_recon_loss(&mut tape, target, zhat)?;

            let real = tape.constant(real_arr);
            let out_real = self.disc.discriminate_t(&mut tape, &bind_d, real);
            let out_fake = self.disc.discriminate_t(&mut tape, &bind_d, zhat);
            let adv = gen_adv_loss(&mut tape, out_fake.score);
            let fm = feature_matching_loss(&mut tape, &out_real.feature_maps, &out_fake.feature_maps)?;
            let kl = kl_loss(&mut tape, mu, lv)?;

            let task = match self.cfg.variant {
                Variant::Semantic => {
                    let probe = self.probe.as_ref().unwrap();
                    let targets = batch.targets.as_ref().unwrap();
                    Some(semantic_task_loss(&mut tape, &bind_p, probe, zt, targets, self.cfg.temperature)?)
                }
                Variant::Equivariant => {
                    // Eq. 10 on-tape: h_a(z~) against the encoding of the
                    // filtered input, gradients through both sides.
                    let zfv = tape.constant(batch.z_filt.as_ref().unwrap().clone().into_dyn());
                    let (mu_f, _lv_f) = self.reenc.encode_t(&mut tape, &bind_g, zfv);
                    let left = tape.mul_bcast_const(zt, batch.latent_gains.as_ref().unwrap());
                    let diff = tape.sub(left, mu_f);
                    let norms = tape.l2_per_item(diff);
                    Some(tape.mean_all(norms))
                }
                _ => None,
            };

            let (total, report) =
                total_generator_loss(&mut tape, &GenLossTerms { rec, adv, fm, kl, task }, &self.cfg.weights)?;
            let grads = tape.backward(total);
            self.adam_g.update(&mut self.reenc.params, &bind_g, &grads);
            if self.probe.is_some() {
                self.adam_p.update(&mut self.probe_store, &bind_p, &grads);
            }
            report
        };

        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch,
            losses: report,
            disc: disc_loss,
            lr_generator: self.cfg.lr_generator,
            lr_discriminator: self.cfg.lr_discriminator,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, EPOCH_SALT + epoch as u64))
    }

    /// Runs the remaining epochs, checkpointing after each. On a non-finite
    /// loss the pre-step state is dumped to `checkpoint-lastgood.rbck` and
    /// the error propagates.
    pub fn fit(&mut self, out_dir: &Path) -> Result<FitSummary> {
        let t0 = Instant::now();
        std::fs::create_dir_all(out_dir)?;
        self.write_run_manifest(out_dir, None)?;
        let log_path = out_dir.join("steps.jsonl");
        let mut log = if self.epochs_done > 0 && log_path.exists() {
            JsonlWriter::append(&log_path)?
        } else {
            JsonlWriter::create(&log_path)?
        };

        let mut last = None;
        for epoch in self.epochs_done..self.cfg.epochs {
            let mut rng = self.epoch_rng(epoch);
            let mut order: Vec<usize> = (0..self.chunks.len()).collect();
            order.shuffle(&mut rng);
            for ids in order.chunks_exact(self.cfg.batch_size) {
                let batch = self.assemble_batch(ids, &mut rng)?;
                let record = match self.train_step(&batch, epoch) {
                    Ok(r) => r,
                    Err(e) => {
                        self.save_checkpoint(&out_dir.join("checkpoint-lastgood.rbck"))?;
                        return Err(e);
                    }
                };
                log.write(&record)?;
                last = Some(record);
            }
            self.epochs_done = epoch + 1;
            self.save_checkpoint(&out_dir.join(format!("checkpoint-epoch-{:03}.rbck", epoch + 1)))?;
        }

        self.codec.assert_frozen()?;
        if let (Some(enc), Some(stored)) = (&self.fsem, &self.fsem_hash) {
            if &enc.checksum() != stored {
                return Err(Error::Checkpoint("semantic encoder changed during training".into()));
            }
        }
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        self.write_run_manifest(out_dir, Some(wall_ms))?;
        Ok(FitSummary {
            final_checkpoint: out_dir.join(format!("checkpoint-epoch-{:03}.rbck", self.cfg.epochs)),
            steps: self.step,
            last_record: last,
            wall_ms,
        })
    }

    fn write_run_manifest(&self, out_dir: &Path, wall_ms: Option<f64>) -> Result<()> {
        let manifest = serde_json::json!({
            "kind": "rebottleneck_run",
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": &self.cfg,
            "base_hash": self.base_hash,
            "fsem": self.fsem.as_ref().map(|e| serde_json::json!({
                "name": e.name(),
                "dim": e.dim(),
                "checksum": e.checksum(),
            })),
            "n_chunks": self.chunks.len(),
            "version": env!("CARGO_PKG_VERSION"),
            "wall_ms": wall_ms,
        });
        let tmp = out_dir.join("run_manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        std::fs::rename(tmp, out_dir.join("run_manifest.json"))?;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::json!({
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "rebottleneck",
            "variant": self.cfg.variant.name(),
            "config": &self.cfg,
            "seed": self.cfg.seed,
            "epoch": self.epochs_done,
            "step": self.step,
            "base_hash": self.base_hash,
            "fsem_hash": self.fsem_hash,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let mut tensors = self.reenc.params.to_tensors("gen.");
        tensors.extend(self.disc.params.to_tensors("disc."));
        tensors.extend(self.probe_store.to_tensors("probe."));
        tensors.extend(self.adam_g.to_tensors("opt_g."));
        tensors.extend(self.adam_d.to_tensors("opt_d."));
        tensors.extend(self.adam_p.to_tensors("opt_p."));
        tensors.push(("stats.mean".into(), self.stats.mean.clone().into_dyn()));
        tensors.push(("stats.std".into(), self.stats.std.clone().into_dyn()));
        save_archive(path, &manifest, &tensors)
    }

    /// Rebuilds the trainer from a checkpoint; continues bitwise-identically
    /// to an uninterrupted run because every epoch derives its rng from
    /// `(seed, epoch)` and optimizer moments are stored.
    pub fn resume(
        path: &Path,
        codec: FrozenBaseCodec,
        ds: &WaveformDataset,
        cache: &LatentCache,
        fsem: Option<Box<dyn SemanticEncoder>>,
    ) -> Result<Self> {
        let archive = load_archive(path)?;
        let (cfg, epoch, step) = read_checkpoint_manifest(&archive)?;
        let base_hash = manifest_str(&archive, "base_hash")?;
        if base_hash != codec.param_checksum() {
            return Err(Error::Checkpoint("checkpoint was trained against a different base codec".into()));
        }

        let mut t = Self::with_cache(cfg, codec, ds, cache, fsem)?;
        if let Some(stored) = archive.manifest.get("fsem_hash").and_then(|v| v.as_str()) {
            match &t.fsem_hash {
                Some(h) if h == stored => {}
                _ => return Err(Error::Checkpoint("semantic encoder does not match the checkpoint".into())),
            }
        }
        t.load_state(&archive.tensors)?;
        let stored_mean = archive.tensors.get("stats.mean").ok_or_else(|| Error::Checkpoint("missing stats.mean".into()))?;
        if stored_mean.iter().zip(t.stats.mean.iter()).any(|(a, b)| a != b) {
            return Err(Error::Checkpoint("checkpoint stats do not match the latent cache".into()));
        }
        t.step = step;
        t.epochs_done = epoch;
        Ok(t)
    }

    fn load_state(&mut self, tensors: &BTreeMap<String, Arr>) -> Result<()> {
        self.reenc.params.load_tensors(tensors, "gen.")?;
        self.disc.params.load_tensors(tensors, "disc.")?;
        self.probe_store.load_tensors(tensors, "probe.")?;
        self.adam_g.load_tensors(tensors, "opt_g.")?;
        self.adam_d.load_tensors(tensors, "opt_d.")?;
        self.adam_p.load_tensors(tensors, "opt_p.")?;
        Ok(())
    }

    /// The trained artifact for evaluation, decoupled from trainer state.
    pub fn model(&self) -> Result<ReModel> {
        let mut reencoder = Reencoder::new(self.cfg.reencoder.clone(), self.cfg.seed)?;
        let gen: BTreeMap<String, Arr> = self.reenc.params.to_tensors("").into_iter().collect();
        reencoder.params.load_tensors(&gen, "")?;

        let probe = if self.probe.is_some() {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, PROBE_SALT));
            let p = SemanticProbe::new(&mut store, &mut rng, self.cfg.reencoder.inner_channels, self.cfg.semantic_dim);
            let t: BTreeMap<String, Arr> = self.probe_store.to_tensors("").into_iter().collect();
            store.load_tensors(&t, "")?;
            Some((p, store))
        } else {
            None
        };

        Ok(ReModel {
            variant: self.cfg.variant,
            config: self.cfg.clone(),
            reencoder,
            probe,
            stats: self.stats.clone(),
            base_hash: self.base_hash.clone(),
            epoch: self.epochs_done,
            step: self.step,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub last_record: Option<StepRecord>,
    pub wall_ms: f64,
}

fn manifest_str(archive: &Archive, key: &str) -> Result<String> {
    archive
        .manifest
        .get(key)
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint(format!("manifest missing {key}")))
}

fn read_checkpoint_manifest(archive: &Archive) -> Result<(TrainConfig, usize, u64)> {
    let kind = manifest_str(archive, "kind")?;
    if kind != "rebottleneck" {
        return Err(Error::Checkpoint(format!("expected a rebottleneck checkpoint, found kind {kind:?}")));
    }
    let fv = archive.manifest.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if fv != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {fv}, this build reads {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let cfg: TrainConfig = serde_json::from_value(
        archive.manifest.get("config").cloned().ok_or_else(|| Error::Checkpoint("manifest missing config".into()))?,
    )?;
    let epoch = archive.manifest.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let step = archive.manifest.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
    Ok((cfg, epoch, step))
}

/// A trained Re-Bottleneck: re-encoder plus the standardization that maps
/// raw base latents into its input space.
pub struct ReModel {
    pub variant: Variant,
    pub config: TrainConfig,
    pub reencoder: Reencoder,
    pub probe: Option<(SemanticProbe, ParamStore)>,
    pub stats: ChannelStats,
    pub base_hash: String,
    pub epoch: usize,
    pub step: u64,
}

impl ReModel {
    pub fn require_variant(&self, expected: Variant) -> Result<()> {
        if self.variant != expected {
            return Err(Error::VariantMismatch {
                expected: expected.name().to_string(),
                found: self.variant.name().to_string(),
            });
        }
        Ok(())
    }

    pub fn require_base(&self, codec: &FrozenBaseCodec) -> Result<()> {
        if self.base_hash != codec.param_checksum() {
            return Err(Error::Checkpoint("model was trained against a different base codec".into()));
        }
        Ok(())
    }

    /// `z~ = R_E(standardize(z))`, posterior mean.
    pub fn encode_inner(&self, z_raw: &Array2<f64>) -> Result<InnerLatent> {
        self.reencoder.re_encode(&self.stats.standardize(z_raw), None)
    }

    /// `z^ = unstandardize(R_D(z~))`.
    pub fn decode_inner(&self, ztilde: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.stats.unstandardize(&self.reencoder.re_decode(ztilde)?))
    }

    pub fn roundtrip(&self, z_raw: &Array2<f64>) -> Result<Array2<f64>> {
        let inner = self.encode_inner(z_raw)?;
        self.decode_inner(&inner.values)
    }

    /// Pooled probe outputs for a batch of inner latents; semantic only.
    pub fn probe_pooled(&self, ztilde_batch: &[Array2<f64>]) -> Result<Array2<f64>> {
        let (probe, store) = self
            .probe
            .as_ref()
            .ok_or_else(|| Error::Config("model has no semantic probe".into()))?;
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let stacked = stack_latents(&ztilde_batch.iter().collect::<Vec<_>>());
        let z = tape.constant(stacked.into_dyn());
        let out = probe.pooled_t(&mut tape, &bind, z);
        let v = tape.value(out);
        Ok(v.clone().into_dimensionality::<ndarray::Ix2>().unwrap())
    }
}

/// Loads the evaluation-side view of a checkpoint.
pub fn load_model(path: &Path) -> Result<ReModel> {
    let archive = load_archive(path)?;
    let (cfg, epoch, step) = read_checkpoint_manifest(&archive)?;
    let base_hash = manifest_str(&archive, "base_hash")?;

    let mut reencoder = Reencoder::new(cfg.reencoder.clone(), cfg.seed)?;
    reencoder.params.load_tensors(&archive.tensors, "gen.")?;

    let probe = if cfg.variant == Variant::Semantic {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, PROBE_SALT));
        let probe = SemanticProbe::new(&mut store, &mut rng, cfg.reencoder.inner_channels, cfg.semantic_dim);
        store.load_tensors(&archive.tensors, "probe.")?;
        Some((probe, store))
    } else {
        None
    };

    let grab = |name: &str| -> Result<Array1<f64>> {
        let t = archive
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Ok(t.clone().into_dimensionality::<ndarray::Ix1>().map_err(|_| {
            Error::Checkpoint(format!("tensor {name} is not a vector"))
        })?)
    };
    let stats = ChannelStats { mean: grab("stats.mean")?, std: grab("stats.std")? };

    Ok(ReModel { variant: cfg.variant, reencoder, probe, stats, base_hash, epoch, step, config: cfg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{BaseCodec, BaseCodecConfig};
    use crate::datagen::{synth_dataset, SynthSpec};
    use crate::variants::semantic::MelStatsEncoder;

    fn toy_codec_cfg() -> BaseCodecConfig {
        BaseCodecConfig {
            latent_channels: 4,
            downsample: 64,
            width: 12,
            chunk_seconds: 0.064,
            ..BaseCodecConfig::default()
        }
    }

    fn toy_train_cfg(variant: Variant) -> TrainConfig {
        let mut cfg = TrainConfig::for_variant(variant);
        cfg.reencoder = ReencoderConfig {
            in_channels: 4,
            inner_channels: 3,
            num_blocks: 1,
            hidden_dim: 12,
            variational: true,
        };
        cfg.discriminator = DiscConfig { in_channels: 4, bands: 2, hidden: 6, layers: 2 };
        cfg.batch_size = 4;
        cfg.chunk_seconds = 0.064;
        cfg.epochs = 2;
        cfg.semantic_dim = 8;
        cfg
    }

    fn toy_dataset(count: usize) -> WaveformDataset {
        synth_dataset(&SynthSpec { count, duration_s: 0.128, ..SynthSpec::default() }, 77).unwrap()
    }

    fn toy_setup(variant: Variant) -> (TrainConfig, FrozenBaseCodec, WaveformDataset) {
        let codec = FrozenBaseCodec::new(BaseCodec::new(toy_codec_cfg(), 21).unwrap());
        (toy_train_cfg(variant), codec, toy_dataset(16))
    }

    fn fsem_for(variant: Variant, cfg: &TrainConfig) -> Option<Box<dyn SemanticEncoder>> {
        (variant == Variant::Semantic)
            .then(|| Box::new(MelStatsEncoder::new(16000, cfg.semantic_dim, 1).unwrap()) as Box<dyn SemanticEncoder>)
    }

    #[test]
    fn config_validation_rejects_inconsistent_variants() {
        let mut cfg = TrainConfig::for_variant(Variant::Plain);
        assert_eq!(cfg.weights.task, 0.0);
        cfg.validate().unwrap();
        cfg.weights.task = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_variant(Variant::Ordered);
        cfg.mask_fraction = 1.2;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_variant(Variant::Semantic);
        assert_eq!(cfg.weights.task, 2.5);
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_variant(Variant::Equivariant);
        assert_eq!(cfg.weights.task, 0.5);
        cfg.alpha_min_hz = -3.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_variant(Variant::Plain);
        cfg.lr_generator = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_variant_completes_steps_with_finite_losses() {
        for variant in Variant::ALL {
            let (cfg, codec, ds) = toy_setup(variant);
            let fsem = fsem_for(variant, &cfg);
            let mut t = Trainer::new(cfg, codec, &ds, fsem).unwrap();
            let mut rng = t.epoch_rng(0);
            let ids: Vec<usize> = (0..t.cfg.batch_size).collect();
            let batch = t.assemble_batch(&ids, &mut rng).unwrap();
            let rec = t.train_step(&batch, 0).unwrap();
            assert_eq!(rec.step, 1);
            assert!(rec.losses.total.is_finite(), "{variant:?}");
            assert!(rec.disc.is_finite());
            if variant == Variant::Plain || variant == Variant::Ordered {
                assert_eq!(rec.losses.task, 0.0);
            } else {
                assert!(rec.losses.task > 0.0, "{variant:?} task loss should engage");
            }
        }
    }

    #[test]
    fn plain_overfit_reduces_recon_loss() {
        let (mut cfg, codec, ds) = toy_setup(Variant::Plain);
        cfg.weights.adv = 0.0;
        cfg.weights.fm = 0.0;
        cfg.weights.kl = 0.0;
        cfg.lr_generator = 3e-3;
        let mut t = Trainer::new(cfg, codec, &ds, None).unwrap();
        let mut rng = t.epoch_rng(0);
        let ids: Vec<usize> = (0..4).collect();
        let batch = t.assemble_batch(&ids, &mut rng).unwrap();
        let first = t.train_step(&batch, 0).unwrap().losses.rec;
        let mut last = first;
        for _ in 0..199 {
            last = t.train_step(&batch, 0).unwrap().losses.rec;
        }
        assert!(
            last < 0.1 * first,
            "overfit should reach <10% of initial recon: first {first}, last {last}"
        );
    }

    #[test]
    fn discriminator_alone_learns_to_separate() {
        let (cfg, codec, ds) = toy_setup(Variant::Plain);
        let mut t = Trainer::new(cfg, codec, &ds, None).unwrap();
        let mut rng = t.epoch_rng(0);
        let ids: Vec<usize> = (0..4).collect();
        let batch = t.assemble_batch(&ids, &mut rng).unwrap();

        // Freeze the generator by zeroing its learning rate.
        t.adam_g.cfg.lr = 0.0;
        t.adam_p.cfg.lr = 0.0;
        let first = t.train_step(&batch, 0).unwrap().disc;
        let mut last = first;
        for _ in 0..199 {
            last = t.train_step(&batch, 0).unwrap().disc;
        }
        assert!(last < first, "disc loss should fall: {first} -> {last}");
    }

    #[test]
    fn fit_is_deterministic_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut finals = Vec::new();
        for run in 0..2 {
            let (cfg, codec, ds) = toy_setup(Variant::Ordered);
            let mut t = Trainer::new(cfg, codec, &ds, None).unwrap();
            let out = dir.path().join(format!("run{run}"));
            let summary = t.fit(&out).unwrap();
            finals.push(std::fs::read(&summary.final_checkpoint).unwrap());

            let logs = crate::io::jsonl::read_jsonl::<StepRecord>(&out.join("steps.jsonl")).unwrap();
            assert_eq!(summary.steps as usize, logs.len());
        }
        assert_eq!(finals[0], finals[1], "same seed must give identical checkpoints");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();

        let (cfg, codec, ds) = toy_setup(Variant::Plain);
        let cache = precompute_latents(&codec, &ds).unwrap();
        let mut full = Trainer::with_cache(cfg.clone(), codec, &ds, &cache, None).unwrap();
        let full_summary = full.fit(&dir.path().join("full")).unwrap();
        let full_bytes = std::fs::read(&full_summary.final_checkpoint).unwrap();

        let codec2 = FrozenBaseCodec::new(BaseCodec::new(toy_codec_cfg(), 21).unwrap());
        let mut one = cfg.clone();
        one.epochs = 1;
        let mut partial = Trainer::with_cache(one, codec2, &ds, &cache, None).unwrap();
        let part_dir = dir.path().join("partial");
        partial.fit(&part_dir).unwrap();

        let codec3 = FrozenBaseCodec::new(BaseCodec::new(toy_codec_cfg(), 21).unwrap());
        let ckpt = part_dir.join("checkpoint-epoch-001.rbck");
        // Resume under the original epoch budget.
        let archive = load_archive(&ckpt).unwrap();
        let mut stored_cfg: TrainConfig =
            serde_json::from_value(archive.manifest.get("config").cloned().unwrap()).unwrap();
        assert_eq!(stored_cfg.epochs, 1);
        stored_cfg.epochs = cfg.epochs;
        let mut resumed = Trainer::with_cache(stored_cfg, codec3, &ds, &cache, None).unwrap();
        resumed.load_state(&archive.tensors).unwrap();
        resumed.step = archive.manifest.get("step").and_then(|v| v.as_u64()).unwrap();
        resumed.epochs_done = 1;
        let resumed_summary = resumed.fit(&part_dir).unwrap();
        let resumed_bytes = std::fs::read(&resumed_summary.final_checkpoint).unwrap();

        assert_eq!(full_bytes, resumed_bytes, "resumed run must match uninterrupted run bitwise");
    }

    #[test]
    fn checkpoint_roundtrip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, codec, ds) = toy_setup(Variant::Ordered);
        let cache = precompute_latents(&codec, &ds).unwrap();
        let mut t = Trainer::with_cache(cfg, codec, &ds, &cache, None).unwrap();
        let mut rng = t.epoch_rng(0);
        let ids: Vec<usize> = (0..4).collect();
        let batch = t.assemble_batch(&ids, &mut rng).unwrap();
        t.train_step(&batch, 0).unwrap();

        let path = dir.path().join("ck.rbck");
        t.save_checkpoint(&path).unwrap();

        let codec2 = FrozenBaseCodec::new(BaseCodec::new(toy_codec_cfg(), 21).unwrap());
        let resumed = Trainer::resume(&path, codec2, &ds, &cache, None).unwrap();
        assert_eq!(resumed.step, 1);
        assert_eq!(resumed.reenc.params.checksum(), t.reenc.params.checksum());
        assert_eq!(resumed.disc.params.checksum(), t.disc.params.checksum());

        // Wrong base codec is refused.
        let other = FrozenBaseCodec::new(BaseCodec::new(toy_codec_cfg(), 22).unwrap());
        let other_cache = precompute_latents(&other, &ds).unwrap();
        assert!(Trainer::resume(&path, other, &ds, &other_cache, None).is_err());

        // The eval-side loader agrees with the trainer state.
        let model = load_model(&path).unwrap();
        assert_eq!(model.variant, Variant::Ordered);
        assert_eq!(model.reencoder.params.checksum(), t.reenc.params.checksum());
        assert!(model.require_variant(Variant::Semantic).is_err());
        assert!(model.require_variant(Variant::Ordered).is_ok());

        let z = cache.get(ds.items[0].meta.id.as_str()).unwrap().values.clone();
        let chunk = z.slice(ndarray::s![.., ..16]).to_owned();
        let rt = model.roundtrip(&chunk).unwrap();
        assert_eq!(rt.shape(), chunk.shape());
        assert!(rt.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn nonfinite_loss_dumps_lastgood_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, codec, ds) = toy_setup(Variant::Plain);
        // A huge learning rate reliably explodes the generator.
        cfg.lr_generator = 1e18;
        cfg.epochs = 30;
        let mut t = Trainer::new(cfg, codec, &ds, None).unwrap();
        let out = dir.path().join("boom");
        let err = t.fit(&out).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(out.join("checkpoint-lastgood.rbck").exists());
        let rescued = load_model(&out.join("checkpoint-lastgood.rbck")).unwrap();
        for (_, p) in rescued.reencoder.params.iter() {
            assert!(p.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn frozen_base_untouched_by_fit() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, codec, ds) = toy_setup(Variant::Plain);
        let before = codec.param_checksum().to_string();
        let mut t = Trainer::new(cfg, codec, &ds, None).unwrap();
        t.fit(&dir.path().join("run")).unwrap();
        assert_eq!(t.codec.param_checksum(), before);
        t.codec.assert_frozen().unwrap();
    }

    #[test]
    fn semantic_variant_requires_encoder_and_matching_dim() {
        let (cfg, codec, ds) = toy_setup(Variant::Semantic);
        let missing = Trainer::new(cfg, codec, &ds, None);
        assert!(matches!(missing, Err(Error::Config(_))));

        let (cfg, codec, ds) = toy_setup(Variant::Semantic);
        let wrong_dim: Box<dyn SemanticEncoder> = Box::new(MelStatsEncoder::new(16000, 5, 1).unwrap());
        assert!(Trainer::new(cfg, codec, &ds, Some(wrong_dim)).is_err());
    }
}
