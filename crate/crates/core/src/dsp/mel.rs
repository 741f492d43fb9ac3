//! HTK mel scale, triangular filterbank, and the channel-frequency map used
//! by the latent low-pass filter.

use ndarray::Array2;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Mel-spaced center frequencies for latent channels, spanning [0, Nyquist]:
/// channel 0 sits at 0 Hz, the last at Nyquist.
pub fn channel_center_freqs(channels: usize, sample_rate: u32) -> Vec<f64> {
    assert!(channels >= 1);
    let nyq = sample_rate as f64 / 2.0;
    if channels == 1 {
        return vec![0.0];
    }
    let top = hz_to_mel(nyq);
    (0..channels)
        .map(|c| mel_to_hz(c as f64 / (channels - 1) as f64 * top))
        .collect()
}

pub struct MelFilterbank {
    /// (n_mels, n_fft/2 + 1), triangular weights with unit peak.
    pub weights: Array2<f64>,
    pub n_mels: usize,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Self {
        assert!(n_mels >= 1 && fmax > fmin && fmin >= 0.0);
        let bins = n_fft / 2 + 1;
        let (ml, mh) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(ml + (mh - ml) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((n_mels, bins));
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let w = if f >= lo && f <= mid && mid > lo {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi && hi > mid {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[[m, k]] = w;
            }
        }
        Self { weights, n_mels }
    }

    /// Project a magnitude spectrogram `(bins, frames)` to `(n_mels, frames)`.
    pub fn apply(&self, mags: &Array2<f64>) -> Array2<f64> {
        self.weights.dot(mags)
    }
}
