//! Waveform reconstruction metrics: multi-resolution STFT distance,
//! log-mel L1, and scale-invariant SDR.

use crate::dsp::mel::MelFilterbank;
use crate::dsp::stft::Stft;
use crate::error::{Error, Result};

/// Window sizes of the multi-resolution STFT distance; hop is a quarter
/// window.
pub const STFT_RESOLUTIONS: [usize; 3] = [256, 512, 1024];
pub const LOG_EPS: f64 = 1e-5;
/// SI-SDR is clamped to keep records finite.
pub const SISDR_CAP_DB: f64 = 60.0;

fn check_lengths(x: &[f64], xhat: &[f64]) -> Result<()> {
    if x.len() != xhat.len() {
        return Err(Error::Shape(format!("waveform lengths {} vs {}", x.len(), xhat.len())));
    }
    if x.is_empty() {
        return Err(Error::Shape("empty waveforms".into()));
    }
    Ok(())
}

/// Sum over resolutions of spectral convergence plus log-magnitude L1.
/// Magnitude-only, so insensitive to sign or phase rotations.
pub fn stft_distance(x: &[f64], xhat: &[f64]) -> Result<f64> {
    check_lengths(x, xhat)?;
    let mut total = 0.0;
    for &win in &STFT_RESOLUTIONS {
        let stft = Stft::new(win, win / 4);
        let mx = stft.magnitude(x);
        let mh = stft.magnitude(xhat);
        let num: f64 = (&mx - &mh).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den: f64 = mx.iter().map(|v| v * v).sum::<f64>().sqrt();
        if den > 0.0 {
            total += num / den;
        } else if num > 0.0 {
            // Silent reference, non-silent estimate: charge the raw energy.
            total += num;
        }
        let logdiff: f64 = mx
            .iter()
            .zip(mh.iter())
            .map(|(a, b)| ((a + LOG_EPS).ln() - (b + LOG_EPS).ln()).abs())
            .sum::<f64>()
            / mx.len() as f64;
        total += logdiff;
    }
    Ok(total)
}

/// L1 between log-mel spectrograms with a configurable band count.
pub fn mel_distance_with(x: &[f64], xhat: &[f64], sample_rate: u32, n_mels: usize) -> Result<f64> {
    check_lengths(x, xhat)?;
    if n_mels == 0 {
        return Err(Error::Config("mel distance needs at least one band".into()));
    }
    let stft = Stft::new(1024, 256);
    let mel = MelFilterbank::new(sample_rate, 1024, n_mels, 0.0, sample_rate as f64 / 2.0);
    let mx = mel.apply(&stft.magnitude(x));
    let mh = mel.apply(&stft.magnitude(xhat));
    let d: f64 = mx
        .iter()
        .zip(mh.iter())
        .map(|(a, b)| ((a + LOG_EPS).ln() - (b + LOG_EPS).ln()).abs())
        .sum::<f64>()
        / mx.len() as f64;
    Ok(d)
}

pub fn mel_distance(x: &[f64], xhat: &[f64], sample_rate: u32) -> Result<f64> {
    mel_distance_with(x, xhat, sample_rate, 64)
}

/// Scale-invariant SDR in dB, clamped to [-60, 60].
pub fn sisdr(x: &[f64], xhat: &[f64]) -> Result<f64> {
    check_lengths(x, xhat)?;
    let xx: f64 = x.iter().map(|v| v * v).sum();
    if xx == 0.0 {
        return Err(Error::Eval("SI-SDR reference is silent".into()));
    }
    let dot: f64 = x.iter().zip(xhat).map(|(a, b)| a * b).sum();
    let scale = dot / xx;
    let mut sig = 0.0;
    let mut err = 0.0;
    for (a, b) in x.iter().zip(xhat) {
        let s = scale * a;
        sig += s * s;
        err += (b - s) * (b - s);
    }
    if sig == 0.0 {
        return Ok(-SISDR_CAP_DB);
    }
    if err == 0.0 {
        return Ok(SISDR_CAP_DB);
    }
    Ok((10.0 * (sig / err).log10()).clamp(-SISDR_CAP_DB, SISDR_CAP_DB))
}
