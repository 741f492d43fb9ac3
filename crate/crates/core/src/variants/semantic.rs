//! Semantic targets for the alignment variant. `F_sem` is a pluggable
//! frozen encoder: a toy log-mel-statistics projection for self-contained
//! runs, a label projection built from generator metadata, and an adapter
//! for embedding files precomputed by external models.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::datagen::{mix_seed, Family, ItemMeta};
use crate::dsp::mel::MelFilterbank;
use crate::dsp::stft::Stft;
use crate::error::{Error, Result};
use crate::nn::{hex, Binding, Conv1dLayer, ParamStore};

use super::{infonce_loss, temporal_pool};

pub const RBEM_MAGIC: &[u8; 4] = b"RBEM";
pub const RBEM_VERSION: u32 = 1;

/// `s = F_sem(x)`: an `H x K` sequence plus its temporal mean.
#[derive(Debug, Clone)]
pub struct SemanticEmbedding {
    pub sequence: Array2<f64>,
    pub pooled: Array1<f64>,
}

impl SemanticEmbedding {
    pub fn new(sequence: Array2<f64>) -> Result<Self> {
        if sequence.shape()[1] == 0 {
            return Err(Error::Shape("semantic embedding needs at least one segment".into()));
        }
        if sequence.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("semantic embedding".into()));
        }
        let pooled = temporal_pool(&sequence);
        Ok(Self { sequence, pooled })
    }
}

pub trait SemanticEncoder {
    fn name(&self) -> &'static str;
    /// Embedding dimension H.
    fn dim(&self) -> usize;
    /// Hash of the frozen parameters; recorded in run manifests.
    fn checksum(&self) -> String;
    fn embed(&self, meta: &ItemMeta, wav: &[f64], sample_rate: u32) -> Result<SemanticEmbedding>;
}

/// Toy default `F_sem`: per-segment mean and std of the log-mel spectrogram,
/// pushed through a frozen random projection.
pub struct MelStatsEncoder {
    sample_rate: u32,
    h: usize,
    n_mels: usize,
    seg_frames: usize,
    stft: Stft,
    mel: MelFilterbank,
    proj: Array2<f64>,
}

impl MelStatsEncoder {
    pub fn new(sample_rate: u32, h: usize, seed: u64) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("semantic dimension must be >= 1".into()));
        }
        let n_fft = 512;
        let n_mels = 32;
        let seg_frames = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4D45_4C53));
        let scale = 1.0 / (2.0 * n_mels as f64).sqrt();
        let proj = Array2::from_shape_fn((h, 2 * n_mels), |_| rng.gen_range(-scale..scale));
        Ok(Self {
            sample_rate,
            h,
            n_mels,
            seg_frames,
            stft: Stft::new(n_fft, n_fft / 2),
            mel: MelFilterbank::new(sample_rate, n_fft, n_mels, 0.0, sample_rate as f64 / 2.0),
            proj,
        })
    }
}

impl SemanticEncoder for MelStatsEncoder {
    fn name(&self) -> &'static str {
        "mel_stats"
    }

    fn dim(&self) -> usize {
        self.h
    }

    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"mel_stats");
        for v in [self.sample_rate as u64, self.h as u64, self.n_mels as u64, self.seg_frames as u64] {
            hasher.update(v.to_le_bytes());
        }
        for v in &self.proj {
            hasher.update(v.to_le_bytes());
        }
        hex(&hasher.finalize())
    }

    fn embed(&self, _meta: &ItemMeta, wav: &[f64], sample_rate: u32) -> Result<SemanticEmbedding> {
        if sample_rate != self.sample_rate {
            return Err(Error::SampleRate { expected: self.sample_rate, got: sample_rate });
        }
        if wav.is_empty() {
            return Err(Error::Audio("cannot embed an empty waveform".into()));
        }
        let mel = self.mel.apply(&self.stft.magnitude(wav));
        let logmel = mel.mapv(|v| (v + 1e-5).ln());
        let frames = logmel.shape()[1];
        let k = frames.div_ceil(self.seg_frames);
        let mut seq = Array2::zeros((self.h, k));
        for s in 0..k {
            let start = s * self.seg_frames;
            let end = (start + self.seg_frames).min(frames);
            let seg = logmel.slice(ndarray::s![.., start..end]);
            let mut feat = Array1::zeros(2 * self.n_mels);
            for b in 0..self.n_mels {
                let row = seg.row(b);
                let mean = row.mean().unwrap();
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
                feat[b] = mean;
                feat[self.n_mels + b] = var.sqrt();
            }
            seq.column_mut(s).assign(&self.proj.dot(&feat));
        }
        SemanticEmbedding::new(seq)
    }
}

/// Ground-truth labels for synthetic data: family one-hot plus the canonical
/// parameter vector (signed log1p), projected by a frozen random map.
pub struct LabelEncoder {
    h: usize,
    proj: Array2<f64>,
}

/// Widest canonical parameter layout across the synth families.
const LABEL_PARAM_SLOTS: usize = 17;
const LABEL_FEATURES: usize = Family::SYNTH.len() + LABEL_PARAM_SLOTS;

impl LabelEncoder {
    pub fn new(h: usize, seed: u64) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("semantic dimension must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4C41_4245));
        let scale = 1.0 / (LABEL_FEATURES as f64).sqrt();
        let proj = Array2::from_shape_fn((h, LABEL_FEATURES), |_| rng.gen_range(-scale..scale));
        Ok(Self { h, proj })
    }
}

impl SemanticEncoder for LabelEncoder {
    fn name(&self) -> &'static str {
        "label"
    }

    fn dim(&self) -> usize {
        self.h
    }

    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"label");
        hasher.update((self.h as u64).to_le_bytes());
        for v in &self.proj {
            hasher.update(v.to_le_bytes());
        }
        hex(&hasher.finalize())
    }

    fn embed(&self, meta: &ItemMeta, _wav: &[f64], _sample_rate: u32) -> Result<SemanticEmbedding> {
        if meta.family == Family::External {
            return Err(Error::Config(format!("item {} has no generator labels (external family)", meta.id)));
        }
        let mut feat = Array1::zeros(LABEL_FEATURES);
        let fam_idx = Family::SYNTH.iter().position(|f| *f == meta.family).unwrap();
        feat[fam_idx] = 1.0;
        for (slot, key) in meta.family.canonical_keys().iter().enumerate() {
            let v = meta.param(key).unwrap_or(0.0);
            feat[Family::SYNTH.len() + slot] = v.signum() * v.abs().ln_1p();
        }
        let col = self.proj.dot(&feat);
        SemanticEmbedding::new(col.insert_axis(ndarray::Axis(1)))
    }
}

/// Embeddings computed offline by an external model and stored in an RBEM
/// file. Lookup is by item id; the waveform is ignored.
pub struct PrecomputedEmbeddings {
    h: usize,
    map: BTreeMap<String, Array2<f64>>,
    checksum: String,
}

impl PrecomputedEmbeddings {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let checksum = hex(&Sha256::digest(&bytes));
        let mut r = bytes.as_slice();

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RBEM_MAGIC {
            return Err(Error::Config(format!("{} is not an RBEM embedding file", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != RBEM_VERSION {
            return Err(Error::Config(format!("unsupported RBEM version {version} (expected {RBEM_VERSION})")));
        }
        let h = read_u32(&mut r)? as usize;
        if h == 0 {
            return Err(Error::Config("RBEM header has H = 0".into()));
        }
        let count = read_u64(&mut r)? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let id_len = read_u32(&mut r)? as usize;
            let mut id_bytes = vec![0u8; id_len];
            r.read_exact(&mut id_bytes)?;
            let id = String::from_utf8(id_bytes).map_err(|e| Error::Config(format!("bad RBEM id: {e}")))?;
            let k = read_u64(&mut r)? as usize;
            if k == 0 {
                return Err(Error::Config(format!("RBEM record {id} has K = 0")));
            }
            let mut data = vec![0.0f64; h * k];
            for v in data.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            let seq = Array2::from_shape_vec((h, k), data).unwrap();
            if map.insert(id.clone(), seq).is_some() {
                return Err(Error::Config(format!("duplicate RBEM id {id}")));
            }
        }
        Ok(Self { h, map, checksum })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl SemanticEncoder for PrecomputedEmbeddings {
    fn name(&self) -> &'static str {
        "precomputed"
    }

    fn dim(&self) -> usize {
        self.h
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }

    fn embed(&self, meta: &ItemMeta, _wav: &[f64], _sample_rate: u32) -> Result<SemanticEmbedding> {
        let seq = self
            .map
            .get(&meta.id)
            .ok_or_else(|| Error::Config(format!("no precomputed embedding for item {}", meta.id)))?;
        SemanticEmbedding::new(seq.clone())
    }
}

/// Writes an RBEM file; every sequence must be `H x K_i` with the shared H.
pub fn write_rbem(path: &Path, h: usize, records: &[(String, Array2<f64>)]) -> Result<()> {
    if h == 0 {
        return Err(Error::Config("RBEM H must be >= 1".into()));
    }
    let mut buf = Vec::new();
    buf.write_all(RBEM_MAGIC)?;
    buf.write_all(&RBEM_VERSION.to_le_bytes())?;
    buf.write_all(&(h as u32).to_le_bytes())?;
    buf.write_all(&(records.len() as u64).to_le_bytes())?;
    for (id, seq) in records {
        if seq.shape()[0] != h || seq.shape()[1] == 0 {
            return Err(Error::Shape(format!("embedding for {id} is {:?}, expected ({h}, K>=1)", seq.shape())));
        }
        buf.write_all(&(id.len() as u32).to_le_bytes())?;
        buf.write_all(id.as_bytes())?;
        buf.write_all(&(seq.shape()[1] as u64).to_le_bytes())?;
        for v in seq.iter() {
            buf.write_all(&v.to_le_bytes())?;
        }
    }
    let tmp = path.with_extension("rbem.tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// The trainable linear probe `C' -> H`, applied per frame.
pub struct SemanticProbe {
    conv: Conv1dLayer,
}

impl SemanticProbe {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, inner_channels: usize, h: usize) -> Self {
        Self { conv: Conv1dLayer::new(store, rng, "probe.linear", inner_channels, h, 1, 1, 0, 1) }
    }

    /// `(B, C', T)` inner latents -> `(B, H)` pooled probe outputs. The
    /// linear map commutes with the temporal mean, so probing per frame and
    /// pooling after matches probe-then-pool exactly.
    pub fn pooled_t(&self, tape: &mut Tape, bind: &Binding, ztilde: Var) -> Var {
        let probed = self.conv.forward(tape, bind, ztilde);
        tape.mean_axis(probed, 2)
    }
}

/// Eq. 9 applied to a batch: pooled probe of `z_tilde` against the pooled
/// frozen targets.
pub fn semantic_task_loss(
    tape: &mut Tape,
    bind: &Binding,
    probe: &SemanticProbe,
    ztilde: Var,
    pooled_targets: &Array2<f64>,
    tau: f64,
) -> Result<Var> {
    let zbar = probe.pooled_t(tape, bind, ztilde);
    let sbar = tape.constant(pooled_targets.clone().into_dyn());
    infonce_loss(tape, zbar, sbar, tau)
}

/// Pools target embeddings for a batch into the `(B, H)` matrix Eq. 9 takes.
pub fn pooled_target_matrix(embeddings: &[SemanticEmbedding]) -> Result<Array2<f64>> {
    if embeddings.is_empty() {
        return Err(Error::Shape("empty embedding batch".into()));
    }
    let h = embeddings[0].pooled.len();
    let mut out = Array2::zeros((embeddings.len(), h));
    for (i, e) in embeddings.iter().enumerate() {
        if e.pooled.len() != h {
            return Err(Error::Shape(format!("embedding dim {} != {h}", e.pooled.len())));
        }
        out.row_mut(i).assign(&e.pooled);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Arr;
    use crate::datagen::{Split, SynthSpec};
    use ndarray::IxDyn;

    fn tone_meta() -> ItemMeta {
        ItemMeta {
            id: "tone-00000".into(),
            family: Family::Tone,
            split: Split::Train,
            params: vec![("f0".into(), 440.0), ("peak".into(), 0.7)],
        }
    }

    #[test]
    fn mel_stats_encoder_is_deterministic_and_frozen() {
        let enc_a = MelStatsEncoder::new(16000, 24, 7).unwrap();
        let enc_b = MelStatsEncoder::new(16000, 24, 7).unwrap();
        assert_eq!(enc_a.checksum(), enc_b.checksum());
        assert_ne!(enc_a.checksum(), MelStatsEncoder::new(16000, 24, 8).unwrap().checksum());

        let wav: Vec<f64> = (0..16000).map(|i| (i as f64 * 0.05).sin() * 0.5).collect();
        let e1 = enc_a.embed(&tone_meta(), &wav, 16000).unwrap();
        let e2 = enc_b.embed(&tone_meta(), &wav, 16000).unwrap();
        assert_eq!(e1.sequence, e2.sequence);
        assert_eq!(e1.sequence.shape()[0], 24);
        assert!(e1.sequence.shape()[1] >= 2, "one second should span several segments");
        let manual = e1.sequence.mean_axis(ndarray::Axis(1)).unwrap();
        assert!((&manual - &e1.pooled).iter().all(|d| d.abs() < 1e-12));

        assert!(enc_a.embed(&tone_meta(), &wav, 8000).is_err());
        assert!(enc_a.embed(&tone_meta(), &[], 16000).is_err());
    }

    #[test]
    fn mel_stats_distinguishes_content() {
        let enc = MelStatsEncoder::new(16000, 16, 0).unwrap();
        let low: Vec<f64> = (0..8192).map(|i| (2.0 * std::f64::consts::PI * 200.0 * i as f64 / 16000.0).sin()).collect();
        let high: Vec<f64> = (0..8192).map(|i| (2.0 * std::f64::consts::PI * 3500.0 * i as f64 / 16000.0).sin()).collect();
        let el = enc.embed(&tone_meta(), &low, 16000).unwrap().pooled;
        let eh = enc.embed(&tone_meta(), &high, 16000).unwrap().pooled;
        let dist = (&el - &eh).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dist > 1e-3, "distinct spectra should separate, got {dist}");
    }

    #[test]
    fn label_encoder_reads_metadata_only() {
        let enc = LabelEncoder::new(32, 3).unwrap();
        assert_eq!(enc.dim(), 32);
        let e = enc.embed(&tone_meta(), &[], 16000).unwrap();
        assert_eq!(e.sequence.shape(), &[32, 1]);
        assert_eq!(e.pooled.to_vec(), e.sequence.column(0).to_vec());

        let mut other = tone_meta();
        other.params[0].1 = 880.0;
        let e2 = enc.embed(&other, &[], 16000).unwrap();
        assert_ne!(e.pooled, e2.pooled);

        let ext = ItemMeta { id: "x".into(), family: Family::External, split: Split::Test, params: vec![] };
        assert!(enc.embed(&ext, &[], 16000).is_err());
    }

    #[test]
    fn rbem_roundtrip_and_missing_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.rbem");
        let a = Array2::from_shape_fn((5, 3), |(i, j)| i as f64 - 0.3 * j as f64);
        let b = Array2::from_shape_fn((5, 1), |(i, _)| -(i as f64));
        write_rbem(&path, 5, &[("tone-00000".into(), a.clone()), ("noise-00002".into(), b.clone())]).unwrap();

        let pre = PrecomputedEmbeddings::load(&path).unwrap();
        assert_eq!(pre.dim(), 5);
        assert_eq!(pre.len(), 2);
        let got = pre.embed(&tone_meta(), &[], 16000).unwrap();
        assert_eq!(got.sequence, a);

        let missing = ItemMeta { id: "tone-99999".into(), family: Family::Tone, split: Split::Train, params: vec![] };
        let err = pre.embed(&missing, &[], 16000).unwrap_err();
        assert!(err.to_string().contains("tone-99999"), "{err}");

        let wrong = Array2::zeros((4, 2));
        assert!(write_rbem(&path, 5, &[("x".into(), wrong)]).is_err());
    }

    #[test]
    fn rbem_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.rbem");
        std::fs::write(&path, b"not an embedding file at all").unwrap();
        assert!(PrecomputedEmbeddings::load(&path).is_err());
    }

    #[test]
    fn probe_gradient_flows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probe = SemanticProbe::new(&mut store, &mut rng, 4, 6);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, true);
        let z = tape.constant(Arr::from_shape_fn(IxDyn(&[3, 4, 7]), |_| rng.gen_range(-1.0..1.0)));
        let targets = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let loss = semantic_task_loss(&mut tape, &bind, &probe, z, &targets, 0.07).unwrap();
        assert!(tape.scalar(loss).is_finite());

        let grads = tape.backward(loss);
        let mut norm = 0.0;
        for id in [probe.conv.w, probe.conv.b] {
            if let Some(g) = grads.grad(bind.var(id)) {
                norm += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        assert!(norm.sqrt() > 1e-8, "probe gradient should be nonzero");
    }

    #[test]
    fn probe_then_pool_commutes_with_pool_then_probe() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe = SemanticProbe::new(&mut store, &mut rng, 3, 4);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let z_arr = Arr::from_shape_fn(IxDyn(&[2, 3, 5]), |_| rng.gen_range(-1.0..1.0));
        let z = tape.constant(z_arr.clone());
        let after_var = probe.pooled_t(&mut tape, &bind, z);
        let pooled_after = tape.value(after_var).clone();

        let pooled_first = {
            let v = z_arr.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let pooled = v.mean_axis(ndarray::Axis(2)).unwrap();
            let z2 = tape.constant(pooled.insert_axis(ndarray::Axis(2)).into_dyn());
            let out = probe.pooled_t(&mut tape, &bind, z2);
            tape.value(out).clone()
        };
        let diff = (&pooled_after - &pooled_first).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "commutation violated by {diff}");
    }

    #[test]
    fn spec_default_label_target_exists_for_every_synth_item() {
        let ds = crate::datagen::synth_dataset(&SynthSpec { count: 12, duration_s: 0.2, ..SynthSpec::default() }, 11).unwrap();
        let enc = LabelEncoder::new(32, 0).unwrap();
        for item in &ds.items {
            let e = enc.embed(&item.meta, &[], ds.sample_rate).unwrap();
            assert!(e.pooled.iter().all(|v| v.is_finite()));
        }
    }
}
