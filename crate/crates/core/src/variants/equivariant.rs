//! The paired-filter machinery for the equivariant variant, plus the
//! inference-mode readouts of Eqs. 10 and 11 used by evaluation. The
//! on-tape training versions live in the trainer, which owns the
//! reparameterization noise.

use ndarray::{Array2, ArrayView2};

use crate::audio::Waveform;
use crate::codec::FrozenBaseCodec;
use crate::dsp::filter::{waveform_gains, LatentFilter};
use crate::dsp::stft::Stft;
use crate::error::{Error, Result};
use crate::reencoder::Reencoder;

/// One cutoff driving both domains: `G_a` on waveform STFT bins and `h_a`
/// on inner-latent channels.
pub struct FilterPair {
    pub alpha: f64,
    pub waveform_gains: Vec<f64>,
    pub latent: LatentFilter,
}

pub fn make_filter_pair(alpha: f64, stft: &Stft, sample_rate: u32, inner_channels: usize) -> Result<FilterPair> {
    Ok(FilterPair {
        alpha,
        waveform_gains: waveform_gains(stft, sample_rate, alpha)?,
        latent: LatentFilter::new(alpha, inner_channels, sample_rate)?,
    })
}

impl FilterPair {
    pub fn filter_waveform(&self, x: &Waveform, stft: &Stft) -> Waveform {
        let y = stft.filter_zero_phase(x.samples.as_slice().unwrap(), &self.waveform_gains);
        Waveform { samples: y.into(), sample_rate: x.sample_rate }
    }

    pub fn filter_latent(&self, ztilde: ArrayView2<f64>) -> Array2<f64> {
        self.latent.apply(&ztilde.to_owned())
    }
}

fn check_batch(x: &[Waveform], pairs: &[FilterPair]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if x.len() != pairs.len() {
        return Err(Error::Shape(format!("{} waveforms but {} filter pairs", x.len(), pairs.len())));
    }
    Ok(())
}

fn l2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Eq. 10 at inference: mean over the batch of
/// `|| h_a(R_E(A_E(x))) - R_E(A_E(g_a(x))) ||_2`, posterior means throughout.
pub fn equivariance_loss(
    r: &Reencoder,
    codec: &FrozenBaseCodec,
    x: &[Waveform],
    pairs: &[FilterPair],
    stft: &Stft,
) -> Result<f64> {
    check_batch(x, pairs)?;
    codec.assert_frozen()?;
    let mut total = 0.0;
    for (w, pair) in x.iter().zip(pairs) {
        let ztilde = r.re_encode(&codec.encode(w)?.values, None)?.values;
        let left = pair.filter_latent(ztilde.view());
        let filtered = pair.filter_waveform(w, stft);
        let right = r.re_encode(&codec.encode(&filtered)?.values, None)?.values;
        total += l2(&left, &right);
    }
    Ok(total / x.len() as f64)
}

/// Eq. 11 at inference: mean over the batch of
/// `|| A_E(g_a(x)) - R_D(h_a(R_E(A_E(x)))) ||_2`, the same alpha driving
/// both filters within an item.
pub fn equivariant_recon_loss(
    r: &Reencoder,
    codec: &FrozenBaseCodec,
    x: &[Waveform],
    pairs: &[FilterPair],
    stft: &Stft,
) -> Result<f64> {
    check_batch(x, pairs)?;
    codec.assert_frozen()?;
    let mut total = 0.0;
    for (w, pair) in x.iter().zip(pairs) {
        let filtered = pair.filter_waveform(w, stft);
        let target = codec.encode(&filtered)?.values;
        let ztilde = r.re_encode(&codec.encode(w)?.values, None)?.values;
        let recon = r.re_decode(&pair.filter_latent(ztilde.view()))?;
        total += l2(&target, &recon);
    }
    Ok(total / x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{BaseCodec, BaseCodecConfig};
    use crate::dsp::filter::compose_cutoffs;
    use crate::losses::latent_recon_loss;
    use crate::reencoder::ReencoderConfig;
    use crate::autodiff::Tape;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SR: u32 = 16000;

    fn tiny_setup() -> (Reencoder, FrozenBaseCodec, Stft) {
        let cfg = BaseCodecConfig {
            latent_channels: 4,
            downsample: 64,
            width: 12,
            chunk_seconds: 0.064,
            ..BaseCodecConfig::default()
        };
        let codec = FrozenBaseCodec::new(BaseCodec::new(cfg, 3).unwrap());
        let rcfg = ReencoderConfig {
            in_channels: 4,
            inner_channels: 4,
            num_blocks: 1,
            hidden_dim: 12,
            variational: false,
        };
        (Reencoder::new(rcfg, 5).unwrap(), codec, Stft::new(256, 64))
    }

    fn noise_batch(n: usize, len: usize, seed: u64) -> Vec<Waveform> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Waveform {
                samples: Array1::from_iter((0..len).map(|_| rng.gen_range(-0.5..0.5))),
                sample_rate: SR,
            })
            .collect()
    }

    #[test]
    fn filter_pair_is_consistent_across_domains() {
        let stft = Stft::new(256, 64);
        let pair = make_filter_pair(1200.0, &stft, SR, 8).unwrap();
        assert_eq!(pair.waveform_gains.len(), stft.n_bins());
        assert_eq!(pair.latent.gains.len(), 8);
        assert_eq!(pair.waveform_gains[0], 1.0);
        assert_eq!(pair.latent.gains[0], 1.0);
        assert!(make_filter_pair(0.0, &stft, SR, 8).is_err());
    }

    #[test]
    fn all_pass_limit_reduces_eq11_to_latent_recon() {
        let (r, codec, stft) = tiny_setup();
        let batch = noise_batch(3, 1024, 11);
        let huge = 1e9;
        let pairs: Vec<FilterPair> =
            batch.iter().map(|_| make_filter_pair(huge, &stft, SR, 4).unwrap()).collect();

        let eq11 = equivariant_recon_loss(&r, &codec, &batch, &pairs, &stft).unwrap();

        // Eq. 3 on the same unfiltered latents.
        let mut tape = Tape::new();
        let (mut zs, mut zhats) = (Vec::new(), Vec::new());
        for w in &batch {
            let z = codec.encode(w).unwrap().values;
            let zt = r.re_encode(&z, None).unwrap().values;
            zhats.push(r.re_decode(&zt).unwrap());
            zs.push(z);
        }
        let stack = |vs: &[Array2<f64>]| {
            let (c, t) = (vs[0].shape()[0], vs[0].shape()[1]);
            let mut out = ndarray::Array3::zeros((vs.len(), c, t));
            for (i, v) in vs.iter().enumerate() {
                out.index_axis_mut(ndarray::Axis(0), i).assign(v);
            }
            out.into_dyn()
        };
        let zv = tape.constant(stack(&zs));
        let zhv = tape.constant(stack(&zhats));
        let eq3 = latent_recon_loss(&mut tape, zv, zhv).unwrap();
        let eq3 = tape.scalar(eq3);
        assert!(
            (eq11 - eq3).abs() <= 1e-3 * eq3.max(1e-9) + 1e-6,
            "all-pass Eq.11 {eq11} vs Eq.3 {eq3}"
        );

        // Eq. 10 in the all-pass limit with a deterministic encoder: both
        // sides see (numerically) the same input.
        let eq10 = equivariance_loss(&r, &codec, &batch, &pairs, &stft).unwrap();
        assert!(eq10 < 1e-3, "all-pass Eq.10 should be near zero, got {eq10}");
    }

    #[test]
    fn untrained_model_has_positive_errors() {
        let (r, codec, stft) = tiny_setup();
        let batch = noise_batch(2, 1024, 13);
        let pairs: Vec<FilterPair> =
            batch.iter().map(|_| make_filter_pair(1000.0, &stft, SR, 4).unwrap()).collect();
        let eq10 = equivariance_loss(&r, &codec, &batch, &pairs, &stft).unwrap();
        let eq11 = equivariant_recon_loss(&r, &codec, &batch, &pairs, &stft).unwrap();
        assert!(eq10 > 1e-4, "untrained Eq.10 {eq10}");
        assert!(eq11 > 1e-4, "untrained Eq.11 {eq11}");
    }

    #[test]
    fn batch_and_pair_length_must_agree() {
        let (r, codec, stft) = tiny_setup();
        let batch = noise_batch(2, 512, 17);
        let pairs = vec![make_filter_pair(1000.0, &stft, SR, 4).unwrap()];
        assert!(equivariance_loss(&r, &codec, &batch, &pairs, &stft).is_err());
        assert!(equivariant_recon_loss(&r, &codec, &[], &[], &stft).is_err());
    }

    #[test]
    fn latent_filters_compose_through_the_pair() {
        let stft = Stft::new(256, 64);
        let (a, b) = (800.0, 3000.0);
        let pa = make_filter_pair(a, &stft, SR, 6).unwrap();
        let pb = make_filter_pair(b, &stft, SR, 6).unwrap();
        let pg = make_filter_pair(compose_cutoffs(a, b), &stft, SR, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let z = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
        let two_step = pb.filter_latent(pa.filter_latent(z.view()).view());
        let one_step = pg.filter_latent(z.view());
        let diff = (&two_step - &one_step).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-14, "composition off by {diff}");
    }
}
