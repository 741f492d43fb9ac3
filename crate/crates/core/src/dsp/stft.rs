//! STFT analysis and zero-phase spectral-gain filtering via rustfft.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub struct Stft {
    pub fft_size: usize,
    pub hop: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    /// Hann window, analysis hop `hop` (use fft_size/4 for WOLA filtering).
    pub fn new(fft_size: usize, hop: usize) -> Self {
        assert!(fft_size >= 8 && hop >= 1 && hop <= fft_size);
        let window: Vec<f64> = (0..fft_size)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / fft_size as f64).cos())
            .collect();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(fft_size);
        let inv = planner.plan_fft_inverse(fft_size);
        Self { fft_size, hop, window, fwd, inv }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Center frequency of each bin in Hz.
    pub fn bin_freqs(&self, sample_rate: u32) -> Vec<f64> {
        (0..self.n_bins())
            .map(|k| k as f64 * sample_rate as f64 / self.fft_size as f64)
            .collect()
    }

    /// Magnitude spectrogram `(bins, frames)`. Frames start at multiples of
    /// the hop from sample 0; the tail is zero-padded.
    pub fn magnitude(&self, x: &[f64]) -> Array2<f64> {
        let n = self.fft_size;
        let frames = if x.len() <= n { 1 } else { (x.len() - n).div_ceil(self.hop) + 1 };
        let mut out = Array2::zeros((self.n_bins(), frames));
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for j in 0..frames {
            let start = j * self.hop;
            for i in 0..n {
                let v = x.get(start + i).copied().unwrap_or(0.0);
                buf[i] = Complex::new(v * self.window[i], 0.0);
            }
            self.fwd.process(&mut buf);
            for k in 0..self.n_bins() {
                out[[k, j]] = buf[k].norm();
            }
        }
        out
    }

    /// Apply a real per-bin gain in the STFT domain and resynthesize by
    /// weighted overlap-add. Gains of all ones reconstruct the input to
    /// floating-point accuracy, including the edges.
    pub fn filter_zero_phase(&self, x: &[f64], gains: &[f64]) -> Vec<f64> {
        assert_eq!(gains.len(), self.n_bins(), "one gain per bin");
        let n = self.fft_size;
        let l = x.len();
        // Pad n zeros on both sides so every input sample gets full window
        // coverage, then extend to a whole number of hops.
        let span = l + 2 * n;
        let frames = (span - n).div_ceil(self.hop) + 1;
        let total = (frames - 1) * self.hop + n;
        let mut acc = vec![0.0f64; total];
        let mut wsum = vec![0.0f64; total];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for j in 0..frames {
            let start = j * self.hop;
            for i in 0..n {
                let src = (start + i) as isize - n as isize;
                let v = if src >= 0 && (src as usize) < l { x[src as usize] } else { 0.0 };
                buf[i] = Complex::new(v * self.window[i], 0.0);
            }
            self.fwd.process(&mut buf);
            for k in 0..self.n_bins() {
                buf[k] *= gains[k];
                if k > 0 && k < n - k {
                    buf[n - k] *= gains[k];
                }
            }
            self.inv.process(&mut buf);
            for i in 0..n {
                acc[start + i] += buf[i].re * scale * self.window[i];
                wsum[start + i] += self.window[i] * self.window[i];
            }
        }
        (0..l).map(|i| acc[n + i] / wsum[n + i].max(1e-12)).collect()
    }
}

/// Welch power spectral density estimate: mean of windowed periodograms.
/// Returns `n_fft/2 + 1` power values.
pub fn welch_psd(x: &[f64], n_fft: usize, hop: usize) -> Vec<f64> {
    let stft = Stft::new(n_fft, hop);
    let mags = stft.magnitude(x);
    let frames = mags.shape()[1];
    (0..stft.n_bins())
        .map(|k| (0..frames).map(|j| mags[[k, j]] * mags[[k, j]]).sum::<f64>() / frames as f64)
        .collect()
}
