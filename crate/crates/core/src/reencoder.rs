//! The trainable inner autoencoder R = (R_E, R_D).
//!
//! Each side is a stack of ConvNeXt-V2 blocks at a fixed hidden width,
//! sandwiched between pointwise linear maps that match channel dimensions:
//! C -> hidden -> 2*C' (mean and logvar) on the encoder side, C' -> hidden
//! -> C on the decoder side. No temporal resampling, so T' = T throughout.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Tape, Var};
use crate::datagen::mix_seed;
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv1dLayer, ConvNeXtBlock, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReencoderConfig {
    pub in_channels: usize,
    pub inner_channels: usize,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub variational: bool,
}

impl Default for ReencoderConfig {
    fn default() -> Self {
        Self { in_channels: 16, inner_channels: 16, num_blocks: 4, hidden_dim: 128, variational: true }
    }
}

impl ReencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.inner_channels == 0 {
            return Err(Error::Config("reencoder: channel counts must be >= 1".into()));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("reencoder: num_blocks must be >= 1".into()));
        }
        if self.hidden_dim < 8 {
            return Err(Error::Config("reencoder: hidden_dim must be >= 8".into()));
        }
        Ok(())
    }

    /// Exact per-side parameter counts (encoder, decoder) implied by this
    /// config, computed arithmetically so architecture-scale sanity checks
    /// do not have to allocate full-size weight tensors.
    pub fn param_counts(&self) -> (usize, usize) {
        let (c, cp, h, n) = (self.in_channels, self.inner_channels, self.hidden_dim, self.num_blocks);
        // ConvNeXt block: dw k7 (7h + h), norm 2h, pw expand (4h^2 + 4h),
        // GRN 8h, pw project (4h^2 + h), gain h.
        let block = 8 * h * h + 24 * h;
        let enc_out = if self.variational { 2 * cp } else { cp };
        let enc = (h * c + h) + n * block + (enc_out * h + enc_out);
        let dec = (h * cp + h) + n * block + (c * h + c);
        (enc, dec)
    }
}

/// Inner latent for one item: the working values plus the posterior that
/// produced them. At inference `values == posterior_mean`.
#[derive(Debug, Clone)]
pub struct InnerLatent {
    pub values: Array2<f64>,
    pub posterior_mean: Array2<f64>,
    pub posterior_logvar: Array2<f64>,
}

pub struct Reencoder {
    cfg: ReencoderConfig,
    pub params: ParamStore,
    enc_in: Conv1dLayer,
    enc_blocks: Vec<ConvNeXtBlock>,
    enc_out: Conv1dLayer,
    dec_in: Conv1dLayer,
    dec_blocks: Vec<ConvNeXtBlock>,
    dec_out: Conv1dLayer,
}

impl Reencoder {
    pub fn new(cfg: ReencoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5245454E));
        let (c, cp, h) = (cfg.in_channels, cfg.inner_channels, cfg.hidden_dim);
        let enc_out_ch = if cfg.variational { 2 * cp } else { cp };
        let enc_in = Conv1dLayer::new(&mut ps, &mut rng, "enc.in", c, h, 1, 1, 0, 1);
        let enc_blocks = (0..cfg.num_blocks)
            .map(|i| ConvNeXtBlock::new(&mut ps, &mut rng, &format!("enc.block{i}"), h))
            .collect();
        let enc_out = Conv1dLayer::new(&mut ps, &mut rng, "enc.out", h, enc_out_ch, 1, 1, 0, 1);
        let dec_in = Conv1dLayer::new(&mut ps, &mut rng, "dec.in", cp, h, 1, 1, 0, 1);
        let dec_blocks = (0..cfg.num_blocks)
            .map(|i| ConvNeXtBlock::new(&mut ps, &mut rng, &format!("dec.block{i}"), h))
            .collect();
        let dec_out = Conv1dLayer::new(&mut ps, &mut rng, "dec.out", h, c, 1, 1, 0, 1);
        Ok(Self { cfg, params: ps, enc_in, enc_blocks, enc_out, dec_in, dec_blocks, dec_out })
    }

    pub fn config(&self) -> &ReencoderConfig {
        &self.cfg
    }

    /// `(B, C, T)` base latents to posterior `(mu, logvar)`, each
    /// `(B, C', T)`. With `variational = false`, logvar is a zero constant.
    pub fn encode_t(&self, tape: &mut Tape, bind: &Binding, z: Var) -> (Var, Var) {
        let shape = tape.value(z).shape().to_vec();
        assert_eq!(shape[1], self.cfg.in_channels, "re-encoder input channels");
        let cp = self.cfg.inner_channels;
        let mut h = self.enc_in.forward(tape, bind, z);
        for block in &self.enc_blocks {
            h = block.forward(tape, bind, h);
        }
        let out = self.enc_out.forward(tape, bind, h);
        if self.cfg.variational {
            let mu = tape.slice_axis_op(out, 1, 0, cp);
            let lv = tape.slice_axis_op(out, 1, cp, 2 * cp);
            (mu, lv)
        } else {
            let zeros = tape.constant(Arr::zeros(ndarray::IxDyn(&[shape[0], cp, shape[2]])));
            (out, zeros)
        }
    }

    /// `(B, C', T)` inner latents back to `(B, C, T)`.
    pub fn decode_t(&self, tape: &mut Tape, bind: &Binding, zt: Var) -> Var {
        assert_eq!(tape.value(zt).shape()[1], self.cfg.inner_channels, "re-decoder input channels");
        let mut h = self.dec_in.forward(tape, bind, zt);
        for block in &self.dec_blocks {
            h = block.forward(tape, bind, h);
        }
        self.dec_out.forward(tape, bind, h)
    }

    /// Reparameterized sample mu + exp(0.5*logvar) * eps with external
    /// noise, so the trainer controls the stream.
    pub fn reparam_t(tape: &mut Tape, mu: Var, logvar: Var, eps: &Arr) -> Var {
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let noise = tape.mul_bcast_const(sigma, eps);
        tape.add(mu, noise)
    }

    fn check_in_channels(&self, got: usize) -> Result<()> {
        if got != self.cfg.in_channels {
            return Err(Error::ChannelMismatch { expected: self.cfg.in_channels, got });
        }
        Ok(())
    }

    fn check_inner_channels(&self, got: usize) -> Result<()> {
        if got != self.cfg.inner_channels {
            return Err(Error::ChannelMismatch { expected: self.cfg.inner_channels, got });
        }
        Ok(())
    }

    /// Posterior-mean inner latents for a batch, `(B, C, T) -> (B, C', T)`.
    pub fn encode_mean_batch(&self, z: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_in_channels(z.shape()[1])?;
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone().into_dyn());
        let (mu, _) = self.encode_t(&mut tape, &bind, zv);
        Ok(tape.value(mu).clone().into_dimensionality().expect("inner latent rank 3"))
    }

    /// `(B, C', T) -> (B, C, T)`.
    pub fn decode_batch(&self, zt: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_inner_channels(zt.shape()[1])?;
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let zv = tape.constant(zt.clone().into_dyn());
        let out = self.decode_t(&mut tape, &bind, zv);
        Ok(tape.value(out).clone().into_dimensionality().expect("latent rank 3"))
    }

    /// Single-item re-encode. Without an RNG this is the posterior mean;
    /// with one, a reparameterized sample (training-mode behavior).
    pub fn re_encode(&self, z: &Array2<f64>, rng: Option<&mut ChaCha8Rng>) -> Result<InnerLatent> {
        self.check_in_channels(z.shape()[0])?;
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let zb = z.clone().insert_axis(Axis(0));
        let zv = tape.constant(zb.into_dyn());
        let (mu_v, lv_v) = self.encode_t(&mut tape, &bind, zv);
        let mu: Array2<f64> = tape.value(mu_v).clone().into_dimensionality::<ndarray::Ix3>().unwrap().index_axis(Axis(0), 0).to_owned();
        let lv: Array2<f64> = tape.value(lv_v).clone().into_dimensionality::<ndarray::Ix3>().unwrap().index_axis(Axis(0), 0).to_owned();
        let values = match rng {
            Some(rng) if self.cfg.variational => {
                let mut out = mu.clone();
                for (o, &l) in out.iter_mut().zip(lv.iter()) {
                    let u1: f64 = rng.gen::<f64>().max(1e-300);
                    let u2: f64 = rng.gen();
                    let eps = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *o += (0.5 * l).exp() * eps;
                }
                out
            }
            _ => mu.clone(),
        };
        Ok(InnerLatent { values, posterior_mean: mu, posterior_logvar: lv })
    }

    pub fn re_decode(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_inner_channels(values.shape()[0])?;
        let out = self.decode_batch(&values.clone().insert_axis(Axis(0)))?;
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }
}
