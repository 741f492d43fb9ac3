//! The paired Gaussian low-pass filters: G_a on STFT bins of the waveform
//! and h_a on latent channels, driven by one cutoff in Hz.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::dsp::mel::channel_center_freqs;
use crate::dsp::stft::Stft;
use crate::error::{Error, Result};

/// Exponent of the latent filter family; 2 would be a true Gaussian, 1.4
/// matches the mel-compressed roll-off.
pub const FILTER_EXPONENT: f64 = 1.4;

/// Waveform-domain gains G_a[k] = exp(-0.5 f_k^2 / a^2) per STFT bin.
pub fn waveform_gains(stft: &Stft, sample_rate: u32, alpha: f64) -> Result<Vec<f64>> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!("cutoff must be positive, got {alpha}")));
    }
    Ok(stft
        .bin_freqs(sample_rate)
        .iter()
        .map(|&f| (-0.5 * f * f / (alpha * alpha)).exp())
        .collect())
}

/// Low-pass a waveform with the Gaussian STFT-domain filter.
pub fn gaussian_lowpass_waveform(x: &Waveform, alpha: f64, stft: &Stft) -> Result<Waveform> {
    let gains = waveform_gains(stft, x.sample_rate, alpha)?;
    let y = stft.filter_zero_phase(x.samples.as_slice().unwrap(), &gains);
    Ok(Waveform { samples: Array1::from(y), sample_rate: x.sample_rate })
}

/// Latent-domain gains h_a(c) = exp(-0.5 mel(c)^1.4 a^-1.4) with mel-spaced
/// channel center frequencies.
pub struct LatentFilter {
    pub alpha: f64,
    pub gains: Array1<f64>,
    pub centers: Vec<f64>,
}

impl LatentFilter {
    pub fn new(alpha: f64, channels: usize, sample_rate: u32) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::Config(format!("cutoff must be positive, got {alpha}")));
        }
        let centers = channel_center_freqs(channels, sample_rate);
        let gains = centers
            .iter()
            .map(|&f| (-0.5 * f.powf(FILTER_EXPONENT) * alpha.powf(-FILTER_EXPONENT)).exp())
            .collect();
        Ok(Self { alpha, gains, centers })
    }

    /// Scale each channel (row) of a `(C, T)` latent by its gain.
    pub fn apply(&self, z: &Array2<f64>) -> Array2<f64> {
        assert_eq!(z.shape()[0], self.gains.len(), "channel count mismatch");
        z * &self.gains.view().insert_axis(ndarray::Axis(1))
    }
}

/// Cutoff of the composition h_a(h_b(.)): gamma^-1.4 = a^-1.4 + b^-1.4.
pub fn compose_cutoffs(a: f64, b: f64) -> f64 {
    (a.powf(-FILTER_EXPONENT) + b.powf(-FILTER_EXPONENT)).powf(-1.0 / FILTER_EXPONENT)
}

/// Log-uniform cutoff in [alpha_min, alpha_max].
pub fn sample_cutoff(rng: &mut ChaCha8Rng, alpha_min: f64, alpha_max: f64) -> Result<f64> {
    if !(alpha_min > 0.0 && alpha_min <= alpha_max) {
        return Err(Error::Config(format!(
            "invalid cutoff range [{alpha_min}, {alpha_max}]"
        )));
    }
    if alpha_min == alpha_max {
        return Ok(alpha_min);
    }
    let u: f64 = rng.gen_range(0.0..1.0);
    Ok((alpha_min.ln() + u * (alpha_max.ln() - alpha_min.ln())).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft::welch_psd;
    use ndarray::Array;
    use rand::SeedableRng;

    const SR: u32 = 16000;

    fn tone(freq: f64, len: usize) -> Waveform {
        let samples = Array::from_iter(
            (0..len).map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / SR as f64).sin() * 0.5),
        );
        Waveform { samples, sample_rate: SR }
    }

    #[test]
    fn waveform_gain_laws() {
        let stft = Stft::new(1024, 256);
        let gains = waveform_gains(&stft, SR, 1000.0).unwrap();
        assert_eq!(gains[0], 1.0);
        assert!(gains.windows(2).all(|w| w[1] <= w[0]));
        assert!(gains.iter().all(|&g| g > 0.0 && g <= 1.0));
    }

    #[test]
    fn all_pass_limit_is_identity() {
        let x = tone(440.0, 8000);
        let stft = Stft::new(1024, 256);
        let y = gaussian_lowpass_waveform(&x, 10.0 * SR as f64 / 2.0, &stft).unwrap();
        let num: f64 = (&x.samples - &y.samples).mapv(|v| v * v).sum();
        let den: f64 = x.samples.mapv(|v| v * v).sum();
        assert!((num / den).sqrt() < 1e-4, "rel err {}", (num / den).sqrt());
    }

    #[test]
    fn tone_at_twice_cutoff_attenuated_by_e_minus_two() {
        let alpha = 1000.0;
        // 2000 Hz sits exactly on bin 128 of a 1024 FFT at 16 kHz.
        let x = tone(2.0 * alpha, 16000);
        let stft = Stft::new(1024, 256);
        let y = gaussian_lowpass_waveform(&x, alpha, &stft).unwrap();
        // Compare RMS in the steady-state middle.
        let mid = 4000..12000;
        let rx: f64 = x.samples.slice(ndarray::s![mid.clone()]).mapv(|v| v * v).mean().unwrap().sqrt();
        let ry: f64 = y.samples.slice(ndarray::s![mid]).mapv(|v| v * v).mean().unwrap().sqrt();
        let expect = (-2.0f64).exp();
        assert!(
            (ry / rx - expect).abs() <= 0.05 * expect,
            "attenuation {} vs e^-2 {}",
            ry / rx,
            expect
        );
    }

    #[test]
    fn white_noise_envelope_matches_gain_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let samples = Array::from_iter((0..SR as usize * 4).map(|_| rng.gen_range(-0.5..0.5)));
        let x = Waveform { samples, sample_rate: SR };
        let alpha = 2000.0;
        let stft = Stft::new(1024, 256);
        let y = gaussian_lowpass_waveform(&x, alpha, &stft).unwrap();
        let px = welch_psd(x.samples.as_slice().unwrap(), 1024, 512);
        let py = welch_psd(y.samples.as_slice().unwrap(), 1024, 512);
        // Average the PSD ratio over 10-bin bands and compare to G^2 where
        // the gain is not deep in the stopband.
        let gains = waveform_gains(&stft, SR, alpha).unwrap();
        for band in 0..40 {
            let bins = (band * 10 + 1)..(band * 10 + 11);
            let g2: f64 = bins.clone().map(|k| gains[k] * gains[k]).sum::<f64>() / 10.0;
            if g2 < 1e-3 {
                continue;
            }
            let rx: f64 = bins.clone().map(|k| px[k]).sum::<f64>();
            let ry: f64 = bins.map(|k| py[k]).sum::<f64>();
            let db = 10.0 * (ry / rx / g2).log10();
            assert!(db.abs() <= 1.0, "band {band}: {db} dB deviation");
        }
    }

    #[test]
    fn latent_filter_laws() {
        let lf = LatentFilter::new(1000.0, 16, SR).unwrap();
        assert_eq!(lf.gains[0], 1.0); // mel(0) = 0 -> unscaled
        assert!(lf.gains.windows(2).into_iter().all(|w| w[1] <= w[0]));
        assert!(lf.gains.iter().all(|&g| g > 0.0 && g <= 1.0));
        // Huge alpha -> near identity.
        let hf = LatentFilter::new(1e9, 16, SR).unwrap();
        assert!(hf.gains.iter().all(|&g| g >= 0.99));
    }

    #[test]
    fn channel_at_cutoff_frequency_gains_exp_half() {
        // Build a filter whose alpha equals some channel's center frequency.
        let centers = channel_center_freqs(16, SR);
        let alpha = centers[7];
        let lf = LatentFilter::new(alpha, 16, SR).unwrap();
        let expect = (-0.5f64).exp();
        assert!((lf.gains[7] - expect).abs() < 1e-12, "{} vs {}", lf.gains[7], expect);
    }

    #[test]
    fn composition_closure_is_exact() {
        let (a, b) = (900.0, 2500.0);
        let g = compose_cutoffs(a, b);
        let fa = LatentFilter::new(a, 16, SR).unwrap();
        let fb = LatentFilter::new(b, 16, SR).unwrap();
        let fg = LatentFilter::new(g, 16, SR).unwrap();
        for c in 0..16 {
            let combined = fa.gains[c] * fb.gains[c];
            assert!(
                (combined - fg.gains[c]).abs() < 1e-15,
                "channel {c}: {combined} vs {}",
                fg.gains[c]
            );
        }
    }

    #[test]
    fn cutoff_sampling_is_log_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (lo, hi) = (500.0f64, 8000.0f64);
        let n = 10_000;
        let mut logs: Vec<f64> = (0..n)
            .map(|_| sample_cutoff(&mut rng, lo, hi).unwrap().ln())
            .collect();
        logs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov-Smirnov statistic against U(ln lo, ln hi).
        let (llo, lhi) = (lo.ln(), hi.ln());
        let mut ks = 0.0f64;
        for (i, &v) in logs.iter().enumerate() {
            let cdf = (v - llo) / (lhi - llo);
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        // Critical value at p=0.01 is 1.63/sqrt(n).
        assert!(ks < 1.63 / (n as f64).sqrt(), "KS statistic {ks}");
        assert_eq!(sample_cutoff(&mut rng, 700.0, 700.0).unwrap(), 700.0);
        assert!(sample_cutoff(&mut rng, -1.0, 5.0).is_err());
    }
}
