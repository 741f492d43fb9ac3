//! The base autoencoder: a small variational codec over MDCT frames,
//! trained once on synthetic audio and then frozen. Everything downstream
//! (re-encoder training, ablations, equivariance studies) treats it as a
//! fixed pair of maps between waveforms and `C x T` latents.
//!
//! Front end: an orthonormal MDCT with hop `downsample`, so a waveform of
//! `L` samples becomes `T + 1` frames with `T = ceil(L / downsample)`. The
//! encoder's valid k=2 convolution collapses that to exactly `T` latent
//! frames, which keeps the shape law `T = ceil(L / downsample)` exact for
//! every input length.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autodiff::{Tape, Var};
use crate::datagen::{chunker, extract_chunk, mix_seed, Split, WaveformDataset};
use crate::dsp::mdct::{tape_imdct, tape_mdct, Mdct};
use crate::error::{Error, Result};
use crate::io::{load_archive, save_archive};
use crate::losses::kl_loss;
use crate::nn::{Adam, AdamConfig, Binding, Conv1dLayer, ParamStore};

/// MDCT coefficients of peak-normalized audio reach magnitudes around the
/// square root of the hop; this scale brings them near unit range for the
/// convolution stack.
pub const COEFF_SCALE: f64 = 0.125;

const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseCodecConfig {
    pub sample_rate: u32,
    pub latent_channels: usize,
    pub downsample: usize,
    pub width: usize,
    pub kl_weight: f64,
    pub mag_weight: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_seconds: f64,
}

impl Default for BaseCodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            latent_channels: 16,
            downsample: 512,
            width: 96,
            kl_weight: 1e-4,
            mag_weight: 1.0,
            lr: 1e-3,
            epochs: 8,
            batch_size: 8,
            // 2.048 s = 64 hops at the default rate, so chunks decode with
            // no padding slack.
            chunk_seconds: 2.048,
        }
    }
}

impl BaseCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels < 2 {
            return Err(Error::Config("base codec: latent_channels must be >= 2".into()));
        }
        if self.downsample == 0 || self.width == 0 || self.sample_rate == 0 {
            return Err(Error::Config("base codec: downsample, width, sample_rate must be positive".into()));
        }
        if self.kl_weight < 0.0 || self.mag_weight < 0.0 {
            return Err(Error::Config("base codec: loss weights must be nonnegative".into()));
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || !(self.chunk_seconds > 0.0) {
            return Err(Error::Config("base codec: lr, epochs, batch_size, chunk_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.downsample as f64
    }
}

/// A `C x T` latent for one waveform, with the original sample count kept
/// so decoding can trim its right padding.
#[derive(Debug, Clone)]
pub struct Latent {
    pub values: Array2<f64>,
    pub frame_rate: f64,
    pub orig_len: usize,
}

struct CodecNet {
    enc0: Conv1dLayer,
    enc1: Conv1dLayer,
    enc2: Conv1dLayer,
    enc_out: Conv1dLayer,
    dec_in: Conv1dLayer,
    dec1: Conv1dLayer,
    dec2: Conv1dLayer,
    dec_out: Conv1dLayer,
}

pub struct BaseCodec {
    cfg: BaseCodecConfig,
    params: ParamStore,
    net: CodecNet,
    mdct: Arc<Mdct>,
}

impl BaseCodec {
    pub fn new(cfg: BaseCodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x434F4445));
        let (m, w, c) = (cfg.downsample, cfg.width, cfg.latent_channels);
        let net = CodecNet {
            enc0: Conv1dLayer::new(&mut ps, &mut rng, "enc0", m, w, 3, 1, 1, 1),
            enc1: Conv1dLayer::new(&mut ps, &mut rng, "enc1", w, w, 3, 1, 1, 1),
            // valid k=2: T+1 frames -> T
            enc2: Conv1dLayer::new(&mut ps, &mut rng, "enc2", w, w, 2, 1, 0, 1),
            enc_out: Conv1dLayer::new(&mut ps, &mut rng, "enc_out", w, 2 * c, 1, 1, 0, 1),
            dec_in: Conv1dLayer::new(&mut ps, &mut rng, "dec_in", c, w, 1, 1, 0, 1),
            // k=2 pad=1: T frames -> T+1
            dec1: Conv1dLayer::new(&mut ps, &mut rng, "dec1", w, w, 2, 1, 1, 1),
            dec2: Conv1dLayer::new(&mut ps, &mut rng, "dec2", w, w, 3, 1, 1, 1),
            dec_out: Conv1dLayer::new(&mut ps, &mut rng, "dec_out", w, m, 3, 1, 1, 1),
        };
        let mdct = Arc::new(Mdct::new(m));
        Ok(Self { cfg, params: ps, net, mdct })
    }

    pub fn config(&self) -> &BaseCodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(B, L)` waveforms to posterior `(mu, logvar)`, each `(B, C, T)`.
    fn encode_t(&self, tape: &mut Tape, bind: &Binding, x: Var) -> (Var, Var) {
        let c = self.cfg.latent_channels;
        let coeffs = tape_mdct(tape, &self.mdct, x);
        let scaled = tape.scale(coeffs, COEFF_SCALE);
        let h = self.net.enc0.forward(tape, bind, scaled);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.net.enc1.forward(tape, bind, h);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.net.enc2.forward(tape, bind, h);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let out = self.net.enc_out.forward(tape, bind, h);
        let mu = tape.slice_axis_op(out, 1, 0, c);
        let lv = tape.slice_axis_op(out, 1, c, 2 * c);
        (mu, lv)
    }

    /// `(B, C, T)` latents to raw MDCT coefficients `(B, M, T+1)` and the
    /// synthesized waveform `(B, T*M)`.
    fn decode_t(&self, tape: &mut Tape, bind: &Binding, z: Var) -> (Var, Var) {
        let t_frames = tape.value(z).shape()[2];
        let h = self.net.dec_in.forward(tape, bind, z);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.net.dec1.forward(tape, bind, h);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.net.dec2.forward(tape, bind, h);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let c_scaled = self.net.dec_out.forward(tape, bind, h);
        let coeffs = tape.scale(c_scaled, 1.0 / COEFF_SCALE);
        let wav = tape_imdct(tape, &self.mdct, coeffs, t_frames * self.cfg.downsample);
        (coeffs, wav)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseEpochLog {
    pub epoch: usize,
    pub wav_mse: f64,
    pub mag_l1: f64,
    pub kl: f64,
    pub total: f64,
}

/// Trains the toy base VAE: waveform MSE plus MDCT-magnitude L1 plus KL.
/// Deterministic given the seed; aborts on a non-finite loss.
pub fn train_toy_base(
    ds: &WaveformDataset,
    cfg: &BaseCodecConfig,
    seed: u64,
) -> Result<(FrozenBaseCodec, Vec<BaseEpochLog>)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("base codec training: empty dataset".into()));
    }
    if ds.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRate { expected: cfg.sample_rate, got: ds.sample_rate });
    }
    let mut codec = BaseCodec::new(cfg.clone(), seed)?;
    let mut opt = Adam::new(&codec.params, AdamConfig::with_lr(cfg.lr));
    let train_idx = ds.split_indices(Split::Train);
    let (chunks, _) = chunker(ds, &train_idx, cfg.chunk_seconds, cfg.chunk_seconds)?;
    if chunks.is_empty() {
        return Err(Error::Config("base codec training: no train chunks".into()));
    }
    let c = cfg.latent_channels;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4550 + epoch as u64));
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        order.shuffle(&mut rng);
        let bsz = cfg.batch_size.min(order.len());
        let n_batches = order.len() / bsz;
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for batch in order.chunks(bsz).take(n_batches.max(1)) {
            if batch.len() < bsz {
                break;
            }
            let chunk_len = chunks[batch[0]].len;
            let mut x = Array2::zeros((batch.len(), chunk_len));
            for (row, &ci) in batch.iter().enumerate() {
                let w = ds.waveform(chunks[ci].item_idx)?;
                let (samples, _) = extract_chunk(&w, &chunks[ci]);
                x.row_mut(row).assign(&samples);
            }
            let t_frames = codec.mdct.n_frames(chunk_len) - 1;
            let mut eps = Array3::zeros((batch.len(), c, t_frames));
            for v in eps.iter_mut() {
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                *v = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }

            let mut tape = Tape::new();
            let bind = codec.params.bind(&mut tape, true);
            let xv = tape.constant(x.clone().into_dyn());
            let (mu, lv) = codec.encode_t(&mut tape, &bind, xv);
            let half_lv = tape.scale(lv, 0.5);
            let sigma = tape.exp(half_lv);
            let noise = tape.mul_bcast_const(sigma, &eps.clone().into_dyn());
            let z = tape.add(mu, noise);
            let (coeffs_hat, wav_hat) = codec.decode_t(&mut tape, &bind, z);

            let out_len = t_frames * cfg.downsample;
            let mut x_pad = Array2::zeros((batch.len(), out_len));
            x_pad.slice_mut(ndarray::s![.., ..chunk_len.min(out_len)])
                .assign(&x.slice(ndarray::s![.., ..chunk_len.min(out_len)]));
            let x_pad_v = tape.constant(x_pad.clone().into_dyn());
            let diff = tape.sub(wav_hat, x_pad_v);
            let sq = tape.square(diff);
            let wav_mse = tape.mean_all(sq);

            let c_ref = codec.mdct.analyze_batch(x_pad.view()).mapv(f64::abs);
            let c_ref_v = tape.constant(c_ref.into_dyn());
            let c_hat_mag = tape.abs(coeffs_hat);
            let mag_diff = tape.sub(c_hat_mag, c_ref_v);
            let mag_abs = tape.abs(mag_diff);
            let mag_l1 = tape.mean_all(mag_abs);

            let kl = kl_loss(&mut tape, mu, lv)?;
            let total = tape.linear_combination(&[
                (1.0, wav_mse),
                (cfg.mag_weight, mag_l1),
                (cfg.kl_weight, kl),
            ]);
            let tv = tape.scalar(total);
            if !tv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "base codec loss at epoch {epoch} step {steps}: wav={} mag={} kl={}",
                    tape.scalar(wav_mse),
                    tape.scalar(mag_l1),
                    tape.scalar(kl)
                )));
            }
            sums[0] += tape.scalar(wav_mse);
            sums[1] += tape.scalar(mag_l1);
            sums[2] += tape.scalar(kl);
            sums[3] += tv;
            steps += 1;

            let grads = tape.backward(total);
            opt.update(&mut codec.params, &bind, &grads);
        }
        let n = steps.max(1) as f64;
        logs.push(BaseEpochLog {
            epoch,
            wav_mse: sums[0] / n,
            mag_l1: sums[1] / n,
            kl: sums[2] / n,
            total: sums[3] / n,
        });
    }
    Ok((FrozenBaseCodec::new(codec), logs))
}

/// Immutable wrapper used by everything downstream. Encoding is the
/// posterior mean, so repeated calls are bitwise identical.
pub struct FrozenBaseCodec {
    codec: BaseCodec,
    checksum: String,
}

impl FrozenBaseCodec {
    pub fn new(codec: BaseCodec) -> Self {
        let checksum = codec.params.checksum();
        Self { codec, checksum }
    }

    pub fn config(&self) -> &BaseCodecConfig {
        &self.codec.cfg
    }

    pub fn param_checksum(&self) -> &str {
        &self.checksum
    }

    /// Verifies no parameter changed since load; the frozen-ness contract.
    pub fn assert_frozen(&self) -> Result<()> {
        let now = self.codec.params.checksum();
        if now != self.checksum {
            return Err(Error::Checkpoint(format!(
                "base codec parameters changed while frozen: {} -> {}",
                &self.checksum[..12],
                &now[..12]
            )));
        }
        Ok(())
    }

    pub fn latent_frames(&self, l: usize) -> usize {
        l.div_ceil(self.codec.cfg.downsample)
    }

    pub fn frame_rate(&self) -> f64 {
        self.codec.cfg.frame_rate()
    }

    /// Posterior-mean encoding of `(B, L)` waveform rows to `(B, C, T)`.
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Array3<f64> {
        let mut tape = Tape::new();
        let bind = self.codec.params.bind(&mut tape, false);
        let xv = tape.constant(x.to_owned().into_dyn());
        let (mu, _) = self.codec.encode_t(&mut tape, &bind, xv);
        tape.value(mu).clone().into_dimensionality().expect("latent rank 3")
    }

    /// Decodes `(B, C, T)` latents to `(B, T * downsample)` waveform rows.
    pub fn decode_batch(&self, z: ArrayView3<f64>) -> Result<Array2<f64>> {
        let c = self.codec.cfg.latent_channels;
        if z.shape()[1] != c {
            return Err(Error::ChannelMismatch { expected: c, got: z.shape()[1] });
        }
        let mut tape = Tape::new();
        let bind = self.codec.params.bind(&mut tape, false);
        let zv = tape.constant(z.to_owned().into_dyn());
        let (_, wav) = self.codec.decode_t(&mut tape, &bind, zv);
        Ok(tape.value(wav).clone().into_dimensionality().expect("waveform rank 2"))
    }

    pub fn encode(&self, w: &Waveform) -> Result<Latent> {
        if w.sample_rate != self.codec.cfg.sample_rate {
            return Err(Error::SampleRate { expected: self.codec.cfg.sample_rate, got: w.sample_rate });
        }
        let x = w.samples.view().insert_axis(Axis(0)).to_owned();
        let z = self.encode_batch(x.view());
        Ok(Latent {
            values: z.index_axis(Axis(0), 0).to_owned(),
            frame_rate: self.frame_rate(),
            orig_len: w.len(),
        })
    }

    pub fn decode(&self, z: &Latent) -> Result<Waveform> {
        let values = z.values.view().insert_axis(Axis(0)).to_owned();
        let wav = self.decode_batch(values.view())?;
        let full = wav.row(0);
        let n = z.orig_len.min(full.len());
        let samples: Array1<f64> = full.slice(ndarray::s![..n]).to_owned();
        Waveform::new(samples, self.codec.cfg.sample_rate)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let manifest = serde_json::json!({
            "format_version": 1,
            "kind": "base_codec",
            "config": self.codec.cfg,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let tensors = self.codec.params.to_tensors("codec.");
        save_archive(path, &manifest, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = load_archive(path)?;
        if archive.manifest["kind"] != "base_codec" {
            return Err(Error::Checkpoint(format!(
                "{}: expected a base_codec checkpoint, found kind {}",
                path.display(),
                archive.manifest["kind"]
            )));
        }
        let cfg: BaseCodecConfig = serde_json::from_value(archive.manifest["config"].clone())?;
        let mut codec = BaseCodec::new(cfg, 0)?;
        codec.params.load_tensors(&archive.tensors, "codec.")?;
        Ok(Self::new(codec))
    }
}
