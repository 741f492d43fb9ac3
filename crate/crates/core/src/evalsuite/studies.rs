//! The paper's studies as dataset-level drivers: ablation curves, the
//! alignment table, equivariance sweeps, filtered decoding, and the chirp
//! masking probe. Every driver pulls items through the frozen base codec
//! and a trained [`ReModel`], reduces in dataset order, and emits
//! [`MetricRecord`]s or an [`AblationCurve`].

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::codec::{FrozenBaseCodec, Latent};
use crate::datagen::{mix_seed, WaveformDataset};
use crate::dsp::filter::LatentFilter;
use crate::dsp::stft::Stft;
use crate::error::{Error, Result};
use crate::trainer::ReModel;
use crate::variants::equivariant::{make_filter_pair, FilterPair};
use crate::variants::semantic::SemanticEncoder;
use crate::variants::temporal_pool;

use super::recon::{mel_distance, sisdr, stft_distance};
use super::similarity::{cka, pca_rotation, pwcca};
use super::{AblationCurve, AblationPoint, AblationStrategy, MetricRecord};

/// Subsets averaged per m for the random-dropout baseline.
pub const RANDOM_DROPOUT_SUBSETS: usize = 10;

/// STFT used to realize waveform-domain Gaussian filters during eval.
const FILTER_FFT: usize = 1024;
const FILTER_HOP: usize = 256;

const ABLATION_SALT: u64 = 0x41424C41;

struct EvalItem {
    wave: Waveform,
    latent: Latent,
    inner: Array2<f64>,
}

/// Encodes every dataset item once: waveform, raw base latent, and the
/// posterior-mean inner latent. Item order follows the dataset.
fn prepare_items(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    dataset: &WaveformDataset,
) -> Result<Vec<EvalItem>> {
    model.require_base(codec)?;
    if dataset.is_empty() {
        return Err(Error::Eval("empty evaluation dataset".into()));
    }
    let mut items = Vec::with_capacity(dataset.len());
    for idx in 0..dataset.len() {
        let wave = dataset.waveform(idx)?;
        let latent = codec.encode(&wave)?;
        let inner = model.encode_inner(&latent.values)?.values;
        items.push(EvalItem { wave, latent, inner });
    }
    Ok(items)
}

fn decode_modified_inner(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    item: &EvalItem,
    inner: &Array2<f64>,
) -> Result<Waveform> {
    let raw = model.decode_inner(inner)?;
    codec.decode(&Latent {
        values: raw,
        frame_rate: item.latent.frame_rate,
        orig_len: item.latent.orig_len,
    })
}

fn recon_metrics(x: &Waveform, xhat: &Waveform) -> Result<(f64, f64, f64)> {
    let a = x.samples.as_slice().expect("contiguous samples");
    let b = xhat.samples.as_slice().expect("contiguous samples");
    Ok((stft_distance(a, b)?, mel_distance(a, b, x.sample_rate)?, sisdr(a, b)?))
}

/// PCA basis over all inner-latent frames of the dataset, with the channel
/// mean needed to center before rotating.
struct InnerPca {
    components: Array2<f64>,
    mean: Array1<f64>,
}

fn fit_inner_pca(items: &[EvalItem], inner_channels: usize) -> Result<InnerPca> {
    let total_frames: usize = items.iter().map(|it| it.inner.shape()[1]).sum();
    let mut samples = Array2::zeros((total_frames, inner_channels));
    let mut row = 0;
    for it in items {
        for t in 0..it.inner.shape()[1] {
            samples.row_mut(row).assign(&it.inner.column(t));
            row += 1;
        }
    }
    let rot = pca_rotation(&samples)?;
    let mean = samples.mean_axis(Axis(0)).unwrap();
    Ok(InnerPca { components: rot.components, mean })
}

impl InnerPca {
    /// Projects onto the top-m components and back: `μ + W_m W_mᵀ (z − μ)`.
    fn truncate(&self, inner: &Array2<f64>, m: usize) -> Array2<f64> {
        let centered = inner - &self.mean.view().insert_axis(Axis(1));
        let w = self.components.slice(s![.., ..m]);
        let coords = w.t().dot(&centered);
        w.dot(&coords) + &self.mean.view().insert_axis(Axis(1))
    }
}

fn zero_complement(inner: &Array2<f64>, keep: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(inner.raw_dim());
    for &c in keep {
        out.row_mut(c).assign(&inner.row(c));
    }
    out
}

/// Fig. 2: reconstruction quality as a function of retained inner channels.
/// The prefix strategy keeps the first m channels (the nested-dropout
/// ordering), PCA rotates into the dataset's principal basis before
/// truncating, and random dropout averages over channel subsets.
pub fn channel_ablation_curve(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    dataset: &WaveformDataset,
    strategy: AblationStrategy,
    seed: u64,
) -> Result<AblationCurve> {
    let items = prepare_items(model, codec, dataset)?;
    let cp = model.config.reencoder.inner_channels;
    let pca = match strategy {
        AblationStrategy::Pca => Some(fit_inner_pca(&items, cp)?),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ABLATION_SALT));

    let mut points = Vec::with_capacity(cp);
    for m in 1..=cp {
        let subsets: Vec<Vec<usize>> = match strategy {
            AblationStrategy::RebottleneckPrefix | AblationStrategy::Pca => {
                vec![(0..m).collect()]
            }
            AblationStrategy::RandomDropout => (0..RANDOM_DROPOUT_SUBSETS)
                .map(|_| rand::seq::index::sample(&mut rng, cp, m).into_vec())
                .collect(),
        };
        let (mut st, mut mel, mut si) = (0.0, 0.0, 0.0);
        let mut count = 0usize;
        for item in &items {
            for keep in &subsets {
                let truncated = match &pca {
                    Some(p) => p.truncate(&item.inner, m),
                    None => zero_complement(&item.inner, keep),
                };
                let xhat = decode_modified_inner(model, codec, item, &truncated)?;
                let (a, b, c) = recon_metrics(&item.wave, &xhat)?;
                st += a;
                mel += b;
                si += c;
                count += 1;
            }
        }
        let n = count as f64;
        points.push(AblationPoint { m, stft: st / n, mel: mel / n, sisdr: si / n });
    }
    let curve = AblationCurve { strategy, points };
    curve.validate()?;
    Ok(curve)
}

/// Table 2: CKA/PWCCA between the pooled inner bottleneck (B), the linear
/// probe output (LP, only for models carrying one), and the pooled semantic
/// target (T).
pub fn alignment_report(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    fsem: &dyn SemanticEncoder,
    dataset: &WaveformDataset,
) -> Result<Vec<MetricRecord>> {
    let items = prepare_items(model, codec, dataset)?;
    let n = items.len();
    let cp = model.config.reencoder.inner_channels;

    let mut bottleneck = Array2::zeros((n, cp));
    for (i, it) in items.iter().enumerate() {
        bottleneck.row_mut(i).assign(&temporal_pool(&it.inner));
    }

    let mut target = Array2::zeros((n, fsem.dim()));
    for (i, it) in items.iter().enumerate() {
        let samples = it.wave.samples.as_slice().expect("contiguous samples");
        let emb = fsem.embed(&dataset.items[i].meta, samples, it.wave.sample_rate)?;
        target.row_mut(i).assign(&emb.pooled);
    }

    let probe_out = match &model.probe {
        Some(_) => {
            let inners: Vec<Array2<f64>> = items.iter().map(|it| it.inner.clone()).collect();
            Some(model.probe_pooled(&inners)?)
        }
        None => None,
    };

    let mut pairs: Vec<(&str, &Array2<f64>, &Array2<f64>)> =
        vec![("bottleneck-target", &bottleneck, &target)];
    if let Some(lp) = &probe_out {
        pairs.push(("probe-target", lp, &target));
        pairs.push(("bottleneck-probe", &bottleneck, lp));
    }

    let mut records = Vec::new();
    for (pair, x, y) in pairs {
        for (name, value) in [("cka", cka(x, y)?), ("pwcca", pwcca(x, y)?)] {
            records.push(
                MetricRecord::new(name, value)?
                    .with("pair", pair)
                    .with("variant", model.variant.name())
                    .with("encoder", fsem.name()),
            );
        }
    }
    Ok(records)
}

/// §4.3: mean relative Eq. 10 residual per cutoff,
/// `‖h_α(z̃) − R_E(A_E(g_α(x)))‖ / ‖R_E(A_E(g_α(x)))‖` averaged over items.
pub fn equivariance_error_sweep(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    dataset: &WaveformDataset,
    alphas: &[f64],
) -> Result<Vec<MetricRecord>> {
    if alphas.is_empty() {
        return Err(Error::Config("equivariance sweep needs at least one cutoff".into()));
    }
    let items = prepare_items(model, codec, dataset)?;
    let stft = Stft::new(FILTER_FFT, FILTER_HOP);
    let cp = model.config.reencoder.inner_channels;

    let mut records = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let pair = make_filter_pair(alpha, &stft, dataset.sample_rate, cp)?;
        let mut acc = 0.0;
        for item in &items {
            let left = pair.filter_latent(item.inner.view());
            let filtered = pair.filter_waveform(&item.wave, &stft);
            let right = model.encode_inner(&codec.encode(&filtered)?.values)?.values;
            let num = (&left - &right).iter().map(|v| v * v).sum::<f64>().sqrt();
            let den = right.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            acc += num / den;
        }
        records.push(
            MetricRecord::new("equivariance_error", acc / items.len() as f64)?
                .with("alpha_hz", format!("{alpha}"))
                .with("variant", model.variant.name()),
        );
    }
    Ok(records)
}

fn filter_pair_for(
    alpha: f64,
    stft: &Stft,
    sample_rate: u32,
    inner_channels: usize,
) -> Result<FilterPair> {
    make_filter_pair(alpha, stft, sample_rate, inner_channels)
}

/// Table 3: distance to the low-pass filtered target for three systems.
/// (a) the re-bottleneck path with `h_α` applied to the inner latent,
/// (b) the base autoencoder fed the filtered waveform (a quality ceiling),
/// (c) `h_α`-style gains applied naively to raw base latents.
pub fn filtered_decode_eval(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    dataset: &WaveformDataset,
    alpha: f64,
) -> Result<Vec<MetricRecord>> {
    let items = prepare_items(model, codec, dataset)?;
    let stft = Stft::new(FILTER_FFT, FILTER_HOP);
    let cp = model.config.reencoder.inner_channels;
    let pair = filter_pair_for(alpha, &stft, dataset.sample_rate, cp)?;
    let base_filter = LatentFilter::new(alpha, codec.config().latent_channels, dataset.sample_rate)?;

    const SYSTEMS: [&str; 3] = ["rebottleneck", "ae-target", "naive-latent"];
    let mut st = [0.0; 3];
    let mut mel = [0.0; 3];
    for item in &items {
        let target = pair.filter_waveform(&item.wave, &stft);
        let tgt = target.samples.as_slice().expect("contiguous samples");

        let filtered_inner = pair.filter_latent(item.inner.view());
        let rebotted = decode_modified_inner(model, codec, item, &filtered_inner)?;

        let ae_target = codec.decode(&codec.encode(&target)?)?;

        let naive = codec.decode(&Latent {
            values: base_filter.apply(&item.latent.values),
            frame_rate: item.latent.frame_rate,
            orig_len: item.latent.orig_len,
        })?;

        for (i, wav) in [&rebotted, &ae_target, &naive].into_iter().enumerate() {
            let est = wav.samples.as_slice().expect("contiguous samples");
            st[i] += stft_distance(tgt, est)?;
            mel[i] += mel_distance(tgt, est, target.sample_rate)?;
        }
    }

    let n = items.len() as f64;
    let mut records = Vec::with_capacity(6);
    for (i, system) in SYSTEMS.iter().enumerate() {
        for (name, value) in [("filtered_stft", st[i] / n), ("filtered_mel", mel[i] / n)] {
            records.push(
                MetricRecord::new(name, value)?
                    .with("system", *system)
                    .with("alpha_hz", format!("{alpha}"))
                    .with("variant", model.variant.name()),
            );
        }
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

/// Pooled inner latents projected onto their top two principal components,
/// labeled by generator family (the Fig. 4 style scatter export).
pub fn pooled_scatter(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    dataset: &WaveformDataset,
) -> Result<Vec<ScatterPoint>> {
    let items = prepare_items(model, codec, dataset)?;
    let cp = model.config.reencoder.inner_channels;
    let mut pooled = Array2::zeros((items.len(), cp));
    for (i, it) in items.iter().enumerate() {
        pooled.row_mut(i).assign(&temporal_pool(&it.inner));
    }
    let rot = pca_rotation(&pooled)?;
    let mean = pooled.mean_axis(Axis(0)).unwrap();
    let centered = &pooled - &mean.insert_axis(Axis(0));
    let coords = centered.dot(&rot.components);
    Ok((0..items.len())
        .map(|i| ScatterPoint {
            x: coords[[i, 0]],
            y: if cp > 1 { coords[[i, 1]] } else { 0.0 },
            label: dataset.items[i].meta.family.name().to_string(),
        })
        .collect())
}

/// Per-channel masking thresholds `μ_c + 3σ_c` of clean inner-latent
/// magnitudes, estimated over the given items.
fn channel_thresholds(
    model: &ReModel,
    codec: &FrozenBaseCodec,
    dataset: &WaveformDataset,
    indices: &[usize],
) -> Result<Array1<f64>> {
    let cp = model.config.reencoder.inner_channels;
    let mut sum = Array1::<f64>::zeros(cp);
    let mut sumsq = Array1::<f64>::zeros(cp);
    let mut frames = 0usize;
    for &idx in indices {
        let wave = dataset.waveform(idx)?;
        let inner = model.encode_inner(&codec.encode(&wave)?.values)?.values;
        for c in 0..cp {
            for &v in inner.row(c) {
                sum[c] += v.abs();
                sumsq[c] += v * v;
            }
        }
        frames += inner.shape()[1];
    }
    let n = frames as f64;
    Ok(Array1::from_shape_fn(cp, |c| {
        let mu = sum[c] / n;
        let var = (sumsq[c] / n - mu * mu).max(0.0);
        mu + 3.0 * var.sqrt()
    }))
}

fn mask_above_threshold(inner: &Array2<f64>, thresholds: &Array1<f64>) -> Array2<f64> {
    let mut out = inner.clone();
    for (c, mut row) in out.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| if v.abs() > thresholds[c] { 0.0 } else { v });
    }
    out
}

/// §4.3 chirp suppression: mix clean audio with an equal-energy chirp,
/// zero inner-latent cells whose magnitude exceeds the clean-statistics
/// threshold, decode, and score SI-SDR against the clean signal. The first
/// half of `clean` estimates the thresholds; the second half is mixed.
pub fn chirp_masking_experiment(
    equi: &ReModel,
    plain: &ReModel,
    codec: &FrozenBaseCodec,
    clean: &WaveformDataset,
    make_chirp: &mut dyn FnMut(usize, u32) -> Result<Waveform>,
) -> Result<Vec<MetricRecord>> {
    equi.require_base(codec)?;
    plain.require_base(codec)?;
    if clean.len() < 2 {
        return Err(Error::Eval("chirp masking needs at least 2 clean items".into()));
    }
    let split = clean.len().div_ceil(2);
    let held_out: Vec<usize> = (0..split).collect();
    let thr_equi = channel_thresholds(equi, codec, clean, &held_out)?;
    let thr_plain = channel_thresholds(plain, codec, clean, &held_out)?;

    let mut scores = [0.0f64; 2];
    let mut mixture_score = 0.0;
    let test_count = clean.len() - split;
    for idx in split..clean.len() {
        let x = clean.waveform(idx)?;
        let chirp = make_chirp(x.len(), x.sample_rate)?;
        if chirp.len() != x.len() || chirp.sample_rate != x.sample_rate {
            return Err(Error::Shape("chirp generator returned a mismatched waveform".into()));
        }
        let ex = x.samples.dot(&x.samples);
        let ec = chirp.samples.dot(&chirp.samples);
        if ex == 0.0 || ec == 0.0 {
            return Err(Error::Eval("chirp masking needs nonzero clean and chirp energy".into()));
        }
        let mix_samples = &x.samples + &(&chirp.samples * (ex / ec).sqrt());
        let mix = Waveform::new(mix_samples, x.sample_rate)?;
        let clean_slice = x.samples.as_slice().expect("contiguous samples");
        mixture_score += sisdr(clean_slice, mix.samples.as_slice().expect("contiguous samples"))?;

        let z_mix = codec.encode(&mix)?;
        for (i, (model, thr)) in [(equi, &thr_equi), (plain, &thr_plain)].into_iter().enumerate() {
            let inner = model.encode_inner(&z_mix.values)?.values;
            let masked = mask_above_threshold(&inner, thr);
            let raw = model.decode_inner(&masked)?;
            let est = codec.decode(&Latent {
                values: raw,
                frame_rate: z_mix.frame_rate,
                orig_len: z_mix.orig_len,
            })?;
            scores[i] += sisdr(clean_slice, est.samples.as_slice().expect("contiguous samples"))?;
        }
    }

    let n = test_count as f64;
    Ok(vec![
        MetricRecord::new("chirp_masked_sisdr", scores[0] / n)?
            .with("role", "equivariant")
            .with("variant", equi.variant.name()),
        MetricRecord::new("chirp_masked_sisdr", scores[1] / n)?
            .with("role", "plain")
            .with("variant", plain.variant.name()),
        MetricRecord::new("chirp_mixture_sisdr", mixture_score / n)?.with("role", "mixture"),
    ])
}
