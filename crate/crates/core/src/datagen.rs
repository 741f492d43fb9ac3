//! Synthetic corpus generation, WAV ingestion, and chunking.
//!
//! Four generator families: harmonic tones with ADSR envelopes, linear or
//! exponential chirps, filtered noise bursts, and two-source mixtures. Every
//! item is synthesized on demand from a per-item seed; parameters are drawn
//! from one RNG stream and rendering noise from a second stream derived from
//! the same seed, so the manifest metadata always matches the audio that a
//! later `waveform()` call produces.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, resample_linear, Waveform};
use crate::dsp::stft::Stft;
use crate::error::{Error, Result};
use crate::nn::hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Tone,
    Chirp,
    Noise,
    Mixture,
    /// WAV files loaded from disk; no generator parameters.
    External,
}

impl Family {
    pub const SYNTH: [Family; 4] = [Family::Tone, Family::Chirp, Family::Noise, Family::Mixture];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Tone => "tone",
            Family::Chirp => "chirp",
            Family::Noise => "noise",
            Family::Mixture => "mixture",
            Family::External => "external",
        }
    }

    /// Fixed parameter-key layout per family, used to build label vectors.
    /// Keys absent from an item's params read as 0.
    pub fn canonical_keys(&self) -> &'static [&'static str] {
        match self {
            Family::Tone => &["f0", "n_harm", "decay", "attack", "decay_t", "sustain", "release", "peak"],
            Family::Chirp => &["f0", "f1", "kind", "peak"],
            Family::Noise => &[
                "n_bursts", "fc_0", "bw_0", "t0_0", "len_0", "amp_0", "fc_1", "bw_1", "t0_1", "len_1",
                "amp_1", "fc_2", "bw_2", "t0_2", "len_2", "amp_2", "peak",
            ],
            Family::Mixture => &["fam_a", "fam_b", "snr_db", "peak"],
            Family::External => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Index-based 80/10/10 assignment. Keeping it positional (rather than
/// random) makes splits stable across spec changes that only alter count.
pub fn split_for_index(idx: usize) -> Split {
    match idx % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemMeta {
    pub id: String,
    pub family: Family,
    pub split: Split,
    pub params: Vec<(String, f64)>,
}

impl ItemMeta {
    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ItemSource {
    Synth { seed: u64, duration_s: f64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetItem {
    pub meta: ItemMeta,
    pub source: ItemSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub families: Vec<Family>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { count: 2000, duration_s: 4.0, sample_rate: 16000, families: Family::SYNTH.to_vec() }
    }
}

#[derive(Debug, Clone)]
pub struct WaveformDataset {
    pub sample_rate: u32,
    pub items: Vec<DatasetItem>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a root seed and a salt.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

pub fn item_seed(dataset_seed: u64, idx: usize) -> u64 {
    mix_seed(dataset_seed, idx as u64)
}

const RENDER_SALT: u64 = 0x5245_4E44;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    uniform(rng, lo.ln(), hi.ln()).exp()
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn draw_params(family: Family, rng: &mut ChaCha8Rng, duration_s: f64) -> Vec<(String, f64)> {
    let mut p = Vec::new();
    let mut push = |k: &str, v: f64| p.push((k.to_string(), v));
    match family {
        Family::Tone => {
            push("f0", log_uniform(rng, 80.0, 2000.0));
            push("n_harm", rng.gen_range(1..=8) as f64);
            push("decay", uniform(rng, 0.5, 2.0));
            push("attack", uniform(rng, 0.005, 0.1));
            push("decay_t", uniform(rng, 0.02, 0.3));
            push("sustain", uniform(rng, 0.3, 0.9));
            push("release", uniform(rng, 0.05, 0.5));
            push("peak", uniform(rng, 0.4, 0.85));
        }
        Family::Chirp => {
            push("f0", log_uniform(rng, 100.0, 4000.0));
            push("f1", log_uniform(rng, 100.0, 7000.0));
            push("kind", rng.gen_range(0..2) as f64);
            push("peak", uniform(rng, 0.4, 0.85));
        }
        Family::Noise => {
            let n_bursts = rng.gen_range(1..=3usize);
            push("n_bursts", n_bursts as f64);
            for b in 0..n_bursts {
                let t0 = uniform(rng, 0.0, 0.6 * duration_s);
                let len = uniform(rng, 0.3, 1.5).min(duration_s - t0);
                push(&format!("fc_{b}"), log_uniform(rng, 300.0, 6000.0));
                push(&format!("bw_{b}"), uniform(rng, 50.0, 500.0));
                push(&format!("t0_{b}"), t0);
                push(&format!("len_{b}"), len);
                push(&format!("amp_{b}"), uniform(rng, 0.3, 1.0));
            }
            push("peak", uniform(rng, 0.4, 0.85));
        }
        Family::Mixture => {
            let sub = [Family::Tone, Family::Chirp, Family::Noise];
            let fam_a = rng.gen_range(0..3usize);
            let fam_b = rng.gen_range(0..3usize);
            push("fam_a", fam_a as f64);
            push("fam_b", fam_b as f64);
            push("snr_db", uniform(rng, -5.0, 15.0));
            push("peak", uniform(rng, 0.4, 0.85));
            for (prefix, fam) in [("a", sub[fam_a]), ("b", sub[fam_b])] {
                for (k, v) in draw_params(fam, rng, duration_s) {
                    p.push((format!("{prefix}_{k}"), v));
                }
            }
        }
        Family::External => {}
    }
    p
}

fn get(params: &[(String, f64)], key: &str) -> f64 {
    params.iter().find(|(k, _)| k == key).map(|&(_, v)| v).unwrap_or(0.0)
}

fn normalize_to_peak(samples: &mut Array1<f64>, peak: f64) {
    let cur = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if cur > 0.0 {
        let g = peak / cur;
        samples.mapv_inplace(|v| v * g);
    }
}

fn adsr_envelope(t: f64, duration: f64, attack: f64, decay: f64, sustain: f64, release: f64) -> f64 {
    let total = attack + decay + release;
    let scale = if total > 0.9 * duration { 0.9 * duration / total } else { 1.0 };
    let (a, d, r) = (attack * scale, decay * scale, release * scale);
    if t < a {
        t / a.max(1e-9)
    } else if t < a + d {
        1.0 - (1.0 - sustain) * (t - a) / d.max(1e-9)
    } else if t < duration - r {
        sustain
    } else {
        sustain * (duration - t).max(0.0) / r.max(1e-9)
    }
}

fn raised_cosine_edges(samples: &mut [f64], sr: u32, edge_s: f64) {
    let n = samples.len();
    let e = ((edge_s * sr as f64).round() as usize).min(n / 2).max(1);
    for i in 0..e {
        let w = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / e as f64).cos();
        samples[i] *= w;
        samples[n - 1 - i] *= w;
    }
}

fn render_tone(params: &[(String, f64)], sr: u32, duration_s: f64) -> Array1<f64> {
    let n = (duration_s * sr as f64).round() as usize;
    let f0 = get(params, "f0");
    let n_harm = get(params, "n_harm") as usize;
    let decay = get(params, "decay");
    let (attack, decay_t) = (get(params, "attack"), get(params, "decay_t"));
    let (sustain, release) = (get(params, "sustain"), get(params, "release"));
    let nyquist_guard = 0.45 * sr as f64;
    let mut out = Array1::zeros(n);
    for k in 1..=n_harm.max(1) {
        let f = f0 * k as f64;
        if f >= nyquist_guard {
            break;
        }
        let amp = (k as f64).powf(-decay);
        let w = std::f64::consts::TAU * f / sr as f64;
        for (i, o) in out.iter_mut().enumerate() {
            *o += amp * (w * i as f64).sin();
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o *= adsr_envelope(i as f64 / sr as f64, duration_s, attack, decay_t, sustain, release);
    }
    normalize_to_peak(&mut out, get(params, "peak"));
    out
}

fn render_chirp(params: &[(String, f64)], sr: u32, duration_s: f64) -> Array1<f64> {
    let n = (duration_s * sr as f64).round() as usize;
    let (f0, f1) = (get(params, "f0"), get(params, "f1"));
    let exponential = get(params, "kind") >= 0.5;
    let mut out = Array1::zeros(n);
    let d = duration_s;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr as f64;
        let phase = if exponential {
            let lr = (f1 / f0).ln();
            if lr.abs() < 1e-9 {
                std::f64::consts::TAU * f0 * t
            } else {
                std::f64::consts::TAU * f0 * d / lr * ((f1 / f0).powf(t / d) - 1.0)
            }
        } else {
            std::f64::consts::TAU * (f0 * t + (f1 - f0) * t * t / (2.0 * d))
        };
        *o = phase.sin();
    }
    raised_cosine_edges(out.as_slice_mut().unwrap(), sr, 0.02);
    normalize_to_peak(&mut out, get(params, "peak"));
    out
}

fn render_noise(params: &[(String, f64)], rng: &mut ChaCha8Rng, sr: u32, duration_s: f64) -> Array1<f64> {
    let n = (duration_s * sr as f64).round() as usize;
    let mut out = Array1::zeros(n);
    let n_bursts = get(params, "n_bursts") as usize;
    let stft = Stft::new(1024, 256);
    for b in 0..n_bursts {
        let fc = get(params, &format!("fc_{b}"));
        let bw = get(params, &format!("bw_{b}")).max(1.0);
        let t0 = (get(params, &format!("t0_{b}")) * sr as f64).round() as usize;
        let len = ((get(params, &format!("len_{b}")) * sr as f64).round() as usize).max(1);
        let amp = get(params, &format!("amp_{b}"));
        let white: Vec<f64> = (0..len).map(|_| randn(rng)).collect();
        let gains: Vec<f64> = stft
            .bin_freqs(sr)
            .iter()
            .map(|&f| (-0.5 * ((f - fc) / bw).powi(2)).exp())
            .collect();
        let mut burst = stft.filter_zero_phase(&white, &gains);
        let rms = (burst.iter().map(|v| v * v).sum::<f64>() / burst.len() as f64).sqrt();
        if rms > 0.0 {
            for v in burst.iter_mut() {
                *v *= amp / rms;
            }
        }
        raised_cosine_edges(&mut burst, sr, 0.01);
        for (i, &v) in burst.iter().enumerate() {
            if t0 + i < n {
                out[t0 + i] += v;
            }
        }
    }
    normalize_to_peak(&mut out, get(params, "peak"));
    out
}

fn render_mixture(params: &[(String, f64)], rng: &mut ChaCha8Rng, sr: u32, duration_s: f64) -> Array1<f64> {
    let sub = [Family::Tone, Family::Chirp, Family::Noise];
    let strip = |prefix: &str| -> Vec<(String, f64)> {
        params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), *v)))
            .collect()
    };
    let a = render(sub[get(params, "fam_a") as usize], &strip("a_"), rng, sr, duration_s);
    let b = render(sub[get(params, "fam_b") as usize], &strip("b_"), rng, sr, duration_s);
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = a;
    if nb > 0.0 {
        let g = na / nb * 10f64.powf(-get(params, "snr_db") / 20.0);
        out.zip_mut_with(&b, |o, &v| *o += g * v);
    }
    normalize_to_peak(&mut out, get(params, "peak"));
    out
}

fn render(family: Family, params: &[(String, f64)], rng: &mut ChaCha8Rng, sr: u32, duration_s: f64) -> Array1<f64> {
    match family {
        Family::Tone => render_tone(params, sr, duration_s),
        Family::Chirp => render_chirp(params, sr, duration_s),
        Family::Noise => render_noise(params, rng, sr, duration_s),
        Family::Mixture => render_mixture(params, rng, sr, duration_s),
        Family::External => Array1::zeros((duration_s * sr as f64).round() as usize),
    }
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<WaveformDataset> {
    if spec.count == 0 {
        return Err(Error::Config("synth spec: count must be > 0".into()));
    }
    if spec.families.is_empty() {
        return Err(Error::Config("synth spec: at least one generator family required".into()));
    }
    if spec.families.contains(&Family::External) {
        return Err(Error::Config("synth spec: external is not a generator family".into()));
    }
    if !(spec.duration_s > 0.0) || spec.sample_rate == 0 {
        return Err(Error::Config("synth spec: duration and sample rate must be positive".into()));
    }
    let mut items = Vec::with_capacity(spec.count);
    for idx in 0..spec.count {
        let family = spec.families[idx % spec.families.len()];
        let iseed = item_seed(seed, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(iseed);
        let params = draw_params(family, &mut rng, spec.duration_s);
        items.push(DatasetItem {
            meta: ItemMeta {
                id: format!("{}-{:05}", family.name(), idx),
                family,
                split: split_for_index(idx),
                params,
            },
            source: ItemSource::Synth { seed: iseed, duration_s: spec.duration_s },
        });
    }
    let ds = WaveformDataset { sample_rate: spec.sample_rate, items };
    ds.validate()?;
    Ok(ds)
}

/// Scans `dir` for WAV files (sorted by name). Unreadable files are skipped
/// with a note; an empty result is an error. Returned notes also record any
/// resampling or downmixing that `waveform()` will perform.
pub fn load_wav_dir(dir: &Path, target_sr: u32) -> Result<(WaveformDataset, Vec<String>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| e.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    let mut items = Vec::new();
    let mut notes = Vec::new();
    for path in paths {
        match read_wav(&path) {
            Ok(w) => {
                if w.sample_rate != target_sr {
                    notes.push(format!(
                        "{}: will resample {} Hz -> {} Hz",
                        path.display(),
                        w.sample_rate,
                        target_sr
                    ));
                }
                let idx = items.len();
                let id = path.file_name().unwrap().to_string_lossy().into_owned();
                items.push(DatasetItem {
                    meta: ItemMeta { id, family: Family::External, split: split_for_index(idx), params: Vec::new() },
                    source: ItemSource::File { path },
                });
            }
            Err(e) => notes.push(format!("{}: skipped ({e})", path.display())),
        }
    }
    if items.is_empty() {
        return Err(Error::Audio(format!("no readable WAV files in {}", dir.display())));
    }
    let ds = WaveformDataset { sample_rate: target_sr, items };
    ds.validate()?;
    Ok((ds, notes))
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    sample_rate: u32,
    checksum: String,
    items: Vec<DatasetItem>,
}

fn items_checksum(items: &[DatasetItem]) -> String {
    let bytes = serde_json::to_vec(items).expect("dataset items serialize");
    hex(&Sha256::digest(&bytes))
}

impl WaveformDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].meta.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert(item.meta.id.as_str()) {
                return Err(Error::Config(format!("duplicate dataset id: {}", item.meta.id)));
            }
        }
        Ok(())
    }

    /// Sample count of item `idx` at the dataset rate, without synthesizing
    /// or decoding audio.
    pub fn item_len(&self, idx: usize) -> Result<usize> {
        match &self.items[idx].source {
            ItemSource::Synth { duration_s, .. } => {
                Ok((duration_s * self.sample_rate as f64).round() as usize)
            }
            ItemSource::File { path } => {
                let reader = hound::WavReader::open(path)
                    .map_err(|e| Error::Audio(format!("{}: {e}", path.display())));
                let reader = reader?;
                let spec = reader.spec();
                let frames = reader.len() as usize / spec.channels.max(1) as usize;
                if spec.sample_rate == self.sample_rate {
                    Ok(frames)
                } else {
                    Ok((frames as f64 * self.sample_rate as f64 / spec.sample_rate as f64).round() as usize)
                }
            }
        }
    }

    pub fn waveform(&self, idx: usize) -> Result<Waveform> {
        let item = &self.items[idx];
        match &item.source {
            ItemSource::Synth { seed, duration_s } => {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ RENDER_SALT));
                let samples =
                    render(item.meta.family, &item.meta.params, &mut rng, self.sample_rate, *duration_s);
                Waveform::new(samples, self.sample_rate)
            }
            ItemSource::File { path } => {
                let w = read_wav(path)?;
                if w.sample_rate == self.sample_rate {
                    Ok(w)
                } else {
                    Ok(resample_linear(&w, self.sample_rate))
                }
            }
        }
    }

    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        let file = ManifestFile {
            sample_rate: self.sample_rate,
            checksum: items_checksum(&self.items),
            items: self.items.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&file)?;
        json.push(b'\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_manifest(path: &Path) -> Result<WaveformDataset> {
        let bytes = std::fs::read(path)?;
        let file: ManifestFile = serde_json::from_slice(&bytes)?;
        let expect = items_checksum(&file.items);
        if file.checksum != expect {
            return Err(Error::Config(format!(
                "{}: manifest checksum mismatch (edited by hand?)",
                path.display()
            )));
        }
        let ds = WaveformDataset { sample_rate: file.sample_rate, items: file.items };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub item_idx: usize,
    pub start: usize,
    /// Fixed chunk length in samples; `valid <= len`, remainder zero-padded.
    pub len: usize,
    pub valid: usize,
}

pub fn chunker(
    ds: &WaveformDataset,
    indices: &[usize],
    chunk_seconds: f64,
    hop_seconds: f64,
) -> Result<(Vec<Chunk>, Vec<String>)> {
    if !(chunk_seconds > 0.0) || !(hop_seconds > 0.0) {
        return Err(Error::Config("chunker: chunk and hop must be positive".into()));
    }
    let chunk_len = (chunk_seconds * ds.sample_rate as f64).round() as usize;
    let hop = (hop_seconds * ds.sample_rate as f64).round() as usize;
    if chunk_len == 0 || hop == 0 {
        return Err(Error::Config("chunker: chunk and hop round to zero samples".into()));
    }
    let mut chunks = Vec::new();
    let mut warnings = Vec::new();
    for &idx in indices {
        let l = ds.item_len(idx)?;
        if l == 0 {
            warnings.push(format!("{}: empty item skipped", ds.items[idx].meta.id));
            continue;
        }
        if chunk_len >= l {
            if chunk_len > l {
                warnings.push(format!(
                    "{}: shorter than one chunk ({} < {} samples), zero-padded",
                    ds.items[idx].meta.id, l, chunk_len
                ));
            }
            chunks.push(Chunk { item_idx: idx, start: 0, len: chunk_len, valid: l });
            continue;
        }
        let mut start = 0;
        while start < l {
            chunks.push(Chunk { item_idx: idx, start, len: chunk_len, valid: chunk_len.min(l - start) });
            start += hop;
        }
    }
    Ok((chunks, warnings))
}

/// Returns `(samples, mask)`; both have length `chunk.len` and the mask is
/// 1.0 over the first `chunk.valid` samples.
pub fn extract_chunk(w: &Waveform, chunk: &Chunk) -> (Array1<f64>, Array1<f64>) {
    assert!(chunk.start + chunk.valid <= w.len(), "chunk exceeds waveform");
    let mut samples = Array1::zeros(chunk.len);
    let mut mask = Array1::zeros(chunk.len);
    for i in 0..chunk.valid {
        samples[i] = w.samples[chunk.start + i];
        mask[i] = 1.0;
    }
    (samples, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav;
    use std::collections::HashMap;

    fn spec(count: usize, duration_s: f64) -> SynthSpec {
        SynthSpec { count, duration_s, ..Default::default() }
    }

    #[test]
    fn same_spec_and_seed_give_identical_audio() {
        let s = spec(8, 0.5);
        let a = synth_dataset(&s, 42).unwrap();
        let b = synth_dataset(&s, 42).unwrap();
        for idx in 0..8 {
            assert_eq!(a.items[idx].meta.params, b.items[idx].meta.params);
            let (wa, wb) = (a.waveform(idx).unwrap(), b.waveform(idx).unwrap());
            assert_eq!(wa.samples, wb.samples, "item {idx} not bitwise reproducible");
        }
        let c = synth_dataset(&s, 43).unwrap();
        assert_ne!(a.waveform(0).unwrap().samples, c.waveform(0).unwrap().samples);
    }

    #[test]
    fn families_round_robin_within_one_of_even() {
        let ds = synth_dataset(&spec(10, 0.25), 1).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for item in &ds.items {
            *counts.entry(item.meta.family.name()).or_default() += 1;
        }
        let even = 10.0 / 4.0;
        for fam in Family::SYNTH {
            let c = *counts.get(fam.name()).unwrap_or(&0) as f64;
            assert!((c - even).abs() <= 1.0, "{}: {c} vs {even}", fam.name());
        }
    }

    #[test]
    fn splits_are_disjoint_and_eighty_ten_ten() {
        let ds = synth_dataset(&spec(100, 0.25), 5).unwrap();
        let train = ds.split_indices(Split::Train);
        let val = ds.split_indices(Split::Val);
        let test = ds.split_indices(Split::Test);
        assert_eq!((train.len(), val.len(), test.len()), (80, 10, 10));
        let mut all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        ds.validate().unwrap();
    }

    #[test]
    fn rendered_peak_matches_metadata() {
        let ds = synth_dataset(&spec(8, 0.5), 9).unwrap();
        for idx in 0..8 {
            let peak_param = ds.items[idx].meta.param("peak").unwrap();
            let w = ds.waveform(idx).unwrap();
            assert!(
                (w.peak() - peak_param).abs() < 1e-9,
                "item {idx}: peak {} vs param {}",
                w.peak(),
                peak_param
            );
        }
    }

    #[test]
    fn chunk_arithmetic_matches_hand_counts() {
        let ds = synth_dataset(&SynthSpec { families: vec![Family::Tone], ..spec(1, 10.0) }, 3).unwrap();
        let (chunks, warnings) = chunker(&ds, &[0], 3.0, 3.0).unwrap();
        assert_eq!(chunks.len(), 4);
        assert!(warnings.is_empty());
        assert_eq!(chunks[3].valid, 16000);
        let w = ds.waveform(0).unwrap();
        let mask_total: f64 = chunks
            .iter()
            .map(|c| extract_chunk(&w, c).1.sum())
            .sum();
        assert_eq!(mask_total as usize, w.len());

        let ds3 = synth_dataset(&SynthSpec { families: vec![Family::Tone], ..spec(1, 3.0) }, 3).unwrap();
        let (chunks3, warn3) = chunker(&ds3, &[0], 3.0, 3.0).unwrap();
        assert_eq!(chunks3.len(), 1);
        assert_eq!(chunks3[0].valid, chunks3[0].len);
        assert!(warn3.is_empty());

        let ds_short = synth_dataset(&SynthSpec { families: vec![Family::Tone], ..spec(1, 2.0) }, 3).unwrap();
        let (chunks_s, warn_s) = chunker(&ds_short, &[0], 3.0, 3.0).unwrap();
        assert_eq!(chunks_s.len(), 1);
        assert_eq!(chunks_s[0].valid, 32000);
        assert_eq!(chunks_s[0].len, 48000);
        assert_eq!(warn_s.len(), 1);
    }

    #[test]
    fn padded_tail_is_zero_and_mask_valid() {
        let ds = synth_dataset(&SynthSpec { families: vec![Family::Chirp], ..spec(1, 2.0) }, 7).unwrap();
        let (chunks, _) = chunker(&ds, &[0], 3.0, 3.0).unwrap();
        let w = ds.waveform(0).unwrap();
        let (samples, mask) = extract_chunk(&w, &chunks[0]);
        assert_eq!(samples.len(), 48000);
        for i in 32000..48000 {
            assert_eq!(samples[i], 0.0);
            assert_eq!(mask[i], 0.0);
        }
        assert_eq!(mask.sum() as usize, 32000);
    }

    #[test]
    fn manifest_roundtrip_reproduces_audio() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let ds = synth_dataset(&spec(8, 0.5), 11).unwrap();
        ds.save_manifest(&path).unwrap();
        let loaded = WaveformDataset::load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 8);
        for idx in [0, 3, 7] {
            assert_eq!(loaded.items[idx].meta.id, ds.items[idx].meta.id);
            assert_eq!(loaded.waveform(idx).unwrap().samples, ds.waveform(idx).unwrap().samples);
        }
    }

    #[test]
    fn edited_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        synth_dataset(&spec(4, 0.25), 2).unwrap().save_manifest(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let edited = text.replacen("tone-00000", "tone-99999", 1);
        assert_ne!(text, edited);
        std::fs::write(&path, edited).unwrap();
        match WaveformDataset::load_manifest(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("checksum")),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn wav_dir_loads_resamples_and_skips_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let w16 = Waveform::new(Array1::from_vec(vec![0.1; 1600]), 16000).unwrap();
        write_wav(&dir.path().join("a.wav"), &w16).unwrap();
        let w8 = Waveform::new(Array1::from_vec(vec![0.2; 800]), 8000).unwrap();
        write_wav(&dir.path().join("b.wav"), &w8).unwrap();
        std::fs::write(dir.path().join("c.wav"), b"not a wav file").unwrap();

        let (ds, notes) = load_wav_dir(dir.path(), 16000).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(notes.iter().any(|n| n.contains("c.wav") && n.contains("skipped")));
        assert!(notes.iter().any(|n| n.contains("b.wav") && n.contains("resample")));
        let b_idx = ds.items.iter().position(|i| i.meta.id == "b.wav").unwrap();
        assert_eq!(ds.waveform(b_idx).unwrap().len(), 1600);
        assert_eq!(ds.item_len(b_idx).unwrap(), 1600);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_wav_dir(dir.path(), 16000).is_err());
    }

    #[test]
    fn mixture_renders_both_sources() {
        let s = SynthSpec { families: vec![Family::Mixture], ..spec(4, 0.5) };
        let ds = synth_dataset(&s, 21).unwrap();
        for idx in 0..4 {
            let w = ds.waveform(idx).unwrap();
            assert!(w.peak() > 0.0);
            assert!(ds.items[idx].meta.param("snr_db").is_some());
        }
    }
}
