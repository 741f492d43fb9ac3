//! Mono waveforms and WAV file IO.

use std::path::Path;

use ndarray::Array1;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Array1<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Array1<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Scale so the peak equals `target` (no-op for silence).
    pub fn peak_normalize(&mut self, target: f64) {
        let p = self.peak();
        if p > 0.0 {
            self.samples *= target / p;
        }
    }
}

/// Read a WAV file: 16/24/32-bit integer or 32-bit float PCM, any channel
/// count (downmixed to mono by averaging).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Audio(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
        }
    };
    let frames = interleaved.len() / channels;
    let mono: Array1<f64> = (0..frames)
        .map(|i| interleaved[i * channels..(i + 1) * channels].iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Write 32-bit float mono WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    for &v in w.samples.iter() {
        writer
            .write_sample(v as f32)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    }
    writer.finalize().map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Linear-interpolation resampler; adequate for a toy corpus.
pub fn resample_linear(w: &Waveform, target_rate: u32) -> Waveform {
    if w.sample_rate == target_rate || w.is_empty() {
        return Waveform { samples: w.samples.clone(), sample_rate: target_rate };
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let src = &w.samples;
    let samples: Array1<f64> = (0..out_len)
        .map(|i| {
            let pos = i as f64 / ratio;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let a = src[i0.min(src.len() - 1)];
            let b = src[(i0 + 1).min(src.len() - 1)];
            a + frac * (b - a)
        })
        .collect();
    Waveform { samples, sample_rate: target_rate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn wav_roundtrip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples = Array::from_iter((0..100).map(|i| ((i as f64) * 0.1).sin() * 0.7));
        let w = Waveform::new(samples, 16000).unwrap();
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert_eq!(r.len(), w.len());
        let max = (&r.samples - &w.samples).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(max < 1e-6, "f32 quantization error {max}");
    }

    #[test]
    fn resample_scales_length_by_rate_ratio() {
        let w = Waveform::new(Array::zeros(44100), 44100).unwrap();
        let r = resample_linear(&w, 16000);
        assert_eq!(r.len(), 16000);
        assert_eq!(r.sample_rate, 16000);
    }

    #[test]
    fn resample_preserves_a_slow_ramp() {
        let src = Array::from_iter((0..1000).map(|i| i as f64 / 1000.0));
        let w = Waveform::new(src, 32000).unwrap();
        let r = resample_linear(&w, 16000);
        for (i, &v) in r.samples.iter().enumerate() {
            let expect = (i as f64 * 2.0) / 1000.0;
            assert!((v - expect).abs() < 2e-3, "at {i}: {v} vs {expect}");
        }
    }

    #[test]
    fn nonfinite_samples_rejected() {
        let mut s = Array::zeros(4);
        s[2] = f64::NAN;
        assert!(Waveform::new(s, 16000).is_err());
    }
}
