//! The three structures imposed on the inner bottleneck: nested-dropout
//! channel ordering, contrastive semantic alignment, and filter
//! equivariance. This module holds the variant registry, the ordering
//! machinery, and the InfoNCE objective; the semantic encoders and filter
//! plumbing live in the submodules.

pub mod equivariant;
pub mod semantic;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::reencoder::Reencoder;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Unstructured baseline: latent recon + adversarial + KL only.
    Plain,
    /// Nested-dropout channel ordering.
    Ordered,
    /// InfoNCE alignment to a frozen semantic encoder.
    Semantic,
    /// Gaussian-filter equivariance.
    Equivariant,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Plain, Variant::Ordered, Variant::Semantic, Variant::Equivariant];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Ordered => "ordered",
            Variant::Semantic => "semantic",
            Variant::Equivariant => "equivariant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected plain|ordered|semantic|equivariant)")))
    }

    /// Paper-default task weight for this structure.
    pub fn default_task_weight(&self) -> f64 {
        match self {
            Variant::Plain | Variant::Ordered => 0.0,
            Variant::Semantic => 2.5,
            Variant::Equivariant => 0.5,
        }
    }
}

/// `m ~ U{1, C'}`.
pub fn sample_prefix(rng: &mut ChaCha8Rng, inner_channels: usize) -> usize {
    assert!(inner_channels >= 1);
    rng.gen_range(1..=inner_channels)
}

#[derive(Debug, Clone)]
pub struct NestedMask {
    pub m: usize,
    /// `C' x T'`, 1 on channels <= m (1-indexed), constant along time.
    pub mask: Array2<f64>,
}

pub fn nested_mask(m: usize, inner_channels: usize, frames: usize) -> Result<NestedMask> {
    if m < 1 || m > inner_channels {
        return Err(Error::Config(format!("nested mask prefix {m} outside [1, {inner_channels}]")));
    }
    let mask = Array2::from_shape_fn((inner_channels, frames), |(c, _)| if c < m { 1.0 } else { 0.0 });
    Ok(NestedMask { m, mask })
}

/// Chooses exactly `round(fraction * B)` batch rows to mask, each with an
/// independently sampled prefix. Unmasked rows are `None`.
pub fn apply_mask_fraction(
    batch: usize,
    fraction: f64,
    inner_channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Option<usize>>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("mask fraction {fraction} outside [0, 1]")));
    }
    let k = (fraction * batch as f64).round() as usize;
    let chosen = rand::seq::index::sample(rng, batch, k.min(batch));
    let mut out = vec![None; batch];
    for idx in chosen.iter() {
        out[idx] = Some(sample_prefix(rng, inner_channels));
    }
    Ok(out)
}

/// `(B, C', T')` multiplicative mask tensor for a per-item assignment.
pub fn batch_mask_tensor(assignment: &[Option<usize>], inner_channels: usize, frames: usize) -> Arr {
    let b = assignment.len();
    let mut mask = Array3::from_elem((b, inner_channels, frames), 1.0);
    for (i, m) in assignment.iter().enumerate() {
        if let Some(m) = m {
            for c in *m..inner_channels {
                mask.slice_mut(ndarray::s![i, c, ..]).fill(0.0);
            }
        }
    }
    mask.into_dyn()
}

/// Inference-mode masked roundtrip: `R_D(mask (.) R_E(z))`, posterior mean.
pub fn masked_forward(r: &Reencoder, z: &Array2<f64>, mask: &Array2<f64>) -> Result<Array2<f64>> {
    let inner = r.re_encode(z, None)?;
    if mask.shape() != inner.values.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} vs inner latent {:?}",
            mask.shape(),
            inner.values.shape()
        )));
    }
    r.re_decode(&(&inner.values * mask))
}

/// Mean over the time axis of a `(D, T)` sequence.
pub fn temporal_pool(seq: &Array2<f64>) -> Array1<f64> {
    assert!(seq.shape()[1] >= 1, "temporal_pool needs at least one frame");
    seq.mean_axis(ndarray::Axis(1)).unwrap()
}

/// One-directional InfoNCE over cosine similarities with positives on the
/// diagonal: row i of `zbar` is the anchor, `sbar` rows are the candidates.
pub fn infonce_loss(tape: &mut Tape, zbar: Var, sbar: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (sz, ss) = (tape.value(zbar).shape().to_vec(), tape.value(sbar).shape().to_vec());
    if sz != ss || sz.len() != 2 {
        return Err(Error::Shape(format!("infonce: {sz:?} vs {ss:?}")));
    }
    let zn = tape.row_normalize(zbar);
    let sn = tape.row_normalize(sbar);
    let snt = tape.permute(sn, &[1, 0]);
    let sim = tape.matmul(zn, snt);
    let scaled = tape.scale(sim, 1.0 / tau);
    let lse = tape.logsumexp_rows(scaled);
    let diag = tape.diag2(scaled);
    let gap = tape.sub(lse, diag);
    Ok(tape.mean_all(gap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_grads;
    use crate::reencoder::ReencoderConfig;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn prefix_sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_prefix(&mut rng, 1), 1);
        }
        let n = 100_000usize;
        let c = 16usize;
        let mut counts = vec![0usize; c];
        for _ in 0..n {
            counts[sample_prefix(&mut rng, c) - 1] += 1;
        }
        let p = 1.0 / c as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, &count) in counts.iter().enumerate() {
            let dev = (count as f64 - n as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "m={} count {} deviates {dev:.0} > 3sigma", i + 1, count);
        }
        // chi-square against uniform, 15 dof: critical value at p=0.01 is 30.58
        let expected = n as f64 * p;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 30.58, "chi2 {chi2}");
    }

    #[test]
    fn mask_definition_and_nesting() {
        let m = nested_mask(2, 4, 3).unwrap();
        let expect = Array2::from_shape_vec((4, 3), vec![1., 1., 1., 1., 1., 1., 0., 0., 0., 0., 0., 0.]).unwrap();
        assert_eq!(m.mask, expect);

        assert!(nested_mask(4, 4, 2).unwrap().mask.iter().all(|&v| v == 1.0));
        let m1 = nested_mask(1, 4, 2).unwrap().mask;
        assert_eq!(m1.sum(), 2.0);

        assert!(nested_mask(0, 4, 2).is_err());
        assert!(nested_mask(5, 4, 2).is_err());

        for (a, b) in [(1usize, 3usize), (2, 4), (3, 2)] {
            let ma = nested_mask(a, 4, 5).unwrap().mask;
            let mb = nested_mask(b, 4, 5).unwrap().mask;
            let mmin = nested_mask(a.min(b), 4, 5).unwrap().mask;
            assert_eq!(&ma * &mb, mmin, "masks not nested for ({a},{b})");
        }
    }

    #[test]
    fn mask_fraction_counts_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(apply_mask_fraction(8, 0.0, 16, &mut rng).unwrap().iter().all(|m| m.is_none()));
        let all = apply_mask_fraction(8, 1.0, 16, &mut rng).unwrap();
        assert_eq!(all.iter().filter(|m| m.is_some()).count(), 8);
        let threequarter = apply_mask_fraction(64, 0.75, 16, &mut rng).unwrap();
        assert_eq!(threequarter.iter().filter(|m| m.is_some()).count(), 48);
        let ms: std::collections::HashSet<usize> = threequarter.iter().flatten().copied().collect();
        assert!(ms.len() > 1, "independent prefixes expected");
        assert!(apply_mask_fraction(8, 1.5, 16, &mut rng).is_err());
    }

    #[test]
    fn batch_mask_tensor_matches_per_item_masks() {
        let assignment = vec![Some(1), None, Some(3)];
        let t = batch_mask_tensor(&assignment, 3, 2);
        assert_eq!(t.shape(), &[3, 3, 2]);
        let view = t.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        assert_eq!(view.index_axis(ndarray::Axis(0), 0).sum(), 2.0);
        assert_eq!(view.index_axis(ndarray::Axis(0), 1).sum(), 6.0);
        assert_eq!(view.index_axis(ndarray::Axis(0), 2).sum(), 6.0);
    }

    #[test]
    fn masked_forward_agrees_with_definition() {
        let cfg = ReencoderConfig { in_channels: 5, inner_channels: 4, num_blocks: 1, hidden_dim: 8, variational: true };
        let r = Reencoder::new(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));

        let ones = nested_mask(4, 4, 6).unwrap().mask;
        let full = masked_forward(&r, &z, &ones).unwrap();
        let inner = r.re_encode(&z, None).unwrap();
        let unmasked = r.re_decode(&inner.values).unwrap();
        assert_eq!(full, unmasked);

        let zero_code = r.re_decode(&Array2::zeros((4, 6))).unwrap();
        let zeroish = masked_forward(&r, &z, &Array2::zeros((4, 6))).unwrap();
        assert_eq!(zeroish, zero_code);

        assert!(masked_forward(&r, &z, &Array2::zeros((4, 5))).is_err());
    }

    #[test]
    fn temporal_pool_oracles() {
        let seq = Array2::from_shape_vec((1, 2), vec![1.0, 3.0]).unwrap();
        assert_eq!(temporal_pool(&seq), Array1::from_vec(vec![2.0]));
        let constant = Array2::from_elem((3, 7), 0.4);
        assert!(temporal_pool(&constant).iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let fwd = Array2::from_shape_vec((1, 3), vec![1.0, 5.0, 9.0]).unwrap();
        let rev = Array2::from_shape_vec((1, 3), vec![9.0, 5.0, 1.0]).unwrap();
        assert_eq!(temporal_pool(&fwd), temporal_pool(&rev));
    }

    #[test]
    fn infonce_closed_forms() {
        let mut tape = Tape::new();
        // B=1: single positive, no negatives
        let z1 = tape.constant(Arr::from_shape_vec(IxDyn(&[1, 3]), vec![0.2, -0.4, 1.0]).unwrap());
        let s1 = tape.constant(Arr::from_shape_vec(IxDyn(&[1, 3]), vec![0.5, 0.1, 0.3]).unwrap());
        let l = infonce_loss(&mut tape, z1, s1, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        // aligned orthonormal rows at tau=0.07
        let eye = Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = tape.constant(eye.clone());
        let s = tape.constant(eye);
        let l = infonce_loss(&mut tape, z, s, 0.07).unwrap();
        let expect = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((tape.scalar(l) - expect).abs() < 1e-12);
        assert!((tape.scalar(l) - 6.2e-7).abs() < 1e-7);

        // all rows identical -> ln B
        for b in [2usize, 5] {
            let rows = Arr::from_shape_vec(IxDyn(&[b, 3]), [0.3, 0.7, -0.2].repeat(b)).unwrap();
            let z = tape.constant(rows.clone());
            let s = tape.constant(rows);
            let l = infonce_loss(&mut tape, z, s, 0.07).unwrap();
            assert!(
                (tape.scalar(l) - (b as f64).ln()).abs() < 1e-12,
                "B={b}: {} vs {}",
                tape.scalar(l),
                (b as f64).ln()
            );
        }

        let za = tape.constant(Arr::zeros(IxDyn(&[2, 3])));
        let sb = tape.constant(Arr::zeros(IxDyn(&[3, 3])));
        assert!(infonce_loss(&mut tape, za, sb, 0.07).is_err());
        let sa = tape.constant(Arr::zeros(IxDyn(&[2, 3])));
        assert!(infonce_loss(&mut tape, za, sa, 0.0).is_err());
    }

    #[test]
    fn infonce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..3 {
            let _ = seed;
            let z = Arr::from_shape_fn(IxDyn(&[4, 6]), |_| rng.gen_range(-1.0..1.0));
            let s = Arr::from_shape_fn(IxDyn(&[4, 6]), |_| rng.gen_range(-1.0..1.0));
            let err = check_grads(
                |tape, vars| infonce_loss(tape, vars[0], vars[1], 0.2).unwrap(),
                &[z, s],
                1e-5,
            );
            assert!(err < 1e-4, "infonce grad err {err}");
        }
    }

    #[test]
    fn infonce_is_nonnegative_and_detects_alignment() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s_arr = Arr::from_shape_fn(IxDyn(&[6, 8]), |_| rng.gen_range(-1.0..1.0));
        let aligned = tape.constant(s_arr.clone());
        let s = tape.constant(s_arr.clone());
        let l_aligned = infonce_loss(&mut tape, aligned, s, 0.07).unwrap();

        let shuffled_arr = {
            let v = s_arr.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut out = v.to_owned();
            for i in 0..6 {
                out.row_mut(i).assign(&v.row((i + 1) % 6));
            }
            out.into_dyn()
        };
        let misaligned = tape.constant(shuffled_arr);
        let s2 = tape.constant(s_arr);
        let l_mis = infonce_loss(&mut tape, misaligned, s2, 0.07).unwrap();
        assert!(tape.scalar(l_aligned) >= 0.0);
        assert!(tape.scalar(l_aligned) < tape.scalar(l_mis), "alignment should lower the loss");
    }
}
