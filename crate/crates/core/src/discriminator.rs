//! Multi-band latent discriminator.
//!
//! The `C x T` latent is split into equal channel bands, each viewed as a
//! single-channel 2-D map and pushed through a shared conv stack (bands ride
//! along the batch axis, so sharing is literal). Per-item score is the mean
//! of the final map, averaged over bands. Intermediate activations are
//! exposed in fixed layer order for feature matching.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datagen::mix_seed;
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2dLayer, ParamStore};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscConfig {
    pub in_channels: usize,
    pub bands: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { in_channels: 16, bands: 4, hidden: 64, layers: 4 }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.in_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("discriminator: channels, bands, hidden must be positive".into()));
        }
        if self.in_channels % self.bands != 0 {
            return Err(Error::Config(format!(
                "discriminator: {} channels do not split into {} equal bands",
                self.in_channels, self.bands
            )));
        }
        if self.layers < 2 {
            return Err(Error::Config("discriminator: at least 2 conv layers".into()));
        }
        Ok(())
    }
}

pub struct DiscriminatorOutput {
    /// One score per batch item.
    pub score: Var,
    /// Post-activation output of every conv layer, in layer order.
    pub feature_maps: Vec<Var>,
}

pub struct Discriminator {
    cfg: DiscConfig,
    pub params: ParamStore,
    convs: Vec<Conv2dLayer>,
}

impl Discriminator {
    pub fn new(cfg: DiscConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x44495343));
        let mut convs = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let cin = if i == 0 { 1 } else { cfg.hidden };
            let last = i == cfg.layers - 1;
            let cout = if last { 1 } else { cfg.hidden };
            // stride 2 on time for receptive-field growth, except the head
            let stride = if last { (1, 1) } else { (1, 2) };
            convs.push(Conv2dLayer::new(&mut ps, &mut rng, &format!("conv{i}"), cin, cout, (3, 3), stride, (1, 1)));
        }
        Ok(Self { cfg, params: ps, convs })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.cfg
    }

    /// `(B, C, T)` latents to per-item scores and feature maps.
    pub fn discriminate_t(&self, tape: &mut Tape, bind: &Binding, z: Var) -> DiscriminatorOutput {
        let shape = tape.value(z).shape().to_vec();
        assert_eq!(shape.len(), 3, "discriminator input rank");
        assert_eq!(shape[1], self.cfg.in_channels, "discriminator input channels");
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        let bands = self.cfg.bands;
        let mut h = tape.reshape(z, &[b * bands, 1, c / bands, t]);
        let mut feature_maps = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, bind, h);
            if i + 1 < self.convs.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
            feature_maps.push(h);
        }
        let per_band = tape.mean_per_item(h);
        let grouped = tape.reshape(per_band, &[b, bands]);
        let score = tape.mean_axis(grouped, 1);
        DiscriminatorOutput { score, feature_maps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_grads;
    use crate::autodiff::Arr;
    use ndarray::IxDyn;
    use rand::Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Arr::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn shapes_and_arity() {
        let d = Discriminator::new(DiscConfig::default(), 0).unwrap();
        let mut tape = Tape::new();
        let bind = d.params.bind(&mut tape, false);
        let z = tape.constant(randn(&[2, 16, 32], 1));
        let out = d.discriminate_t(&mut tape, &bind, z);
        assert_eq!(tape.value(out.score).shape(), &[2]);
        assert_eq!(out.feature_maps.len(), 4);
        assert!(out.feature_maps.len() >= 3);
        assert!(tape.value(out.score).iter().all(|v| v.is_finite()));
        // bands ride the batch axis in every feature map
        assert_eq!(tape.value(out.feature_maps[0]).shape()[0], 2 * 4);
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let d = Discriminator::new(DiscConfig::default(), 1).unwrap();
        let z = randn(&[1, 16, 8], 2);
        let run = |z: &Arr| {
            let mut tape = Tape::new();
            let bind = d.params.bind(&mut tape, false);
            let zv = tape.constant(z.clone());
            let out = d.discriminate_t(&mut tape, &bind, zv);
            tape.value(out.score).clone()
        };
        assert_eq!(run(&z), run(&z));
    }

    #[test]
    fn uneven_band_split_is_rejected() {
        let cfg = DiscConfig { in_channels: 6, bands: 4, ..Default::default() };
        assert!(Discriminator::new(cfg, 0).is_err());
    }

    #[test]
    fn score_input_gradient_matches_finite_differences() {
        let cfg = DiscConfig { in_channels: 4, bands: 2, hidden: 6, layers: 3 };
        let d = Discriminator::new(cfg, 3).unwrap();
        let z = randn(&[2, 4, 6], 4);
        let err = check_grads(
            |tape, vars| {
                let bind = d.params.bind(tape, false);
                let out = d.discriminate_t(tape, &bind, vars[0]);
                tape.sum_all(out.score)
            },
            &[z],
            1e-5,
        );
        assert!(err < 1e-4, "score input gradient err {err}");
    }

    #[test]
    fn feature_gradients_flow_to_input() {
        let cfg = DiscConfig { in_channels: 4, bands: 2, hidden: 6, layers: 3 };
        let d = Discriminator::new(cfg, 5).unwrap();
        let z = randn(&[1, 4, 6], 6);
        let err = check_grads(
            |tape, vars| {
                let bind = d.params.bind(tape, false);
                let out = d.discriminate_t(tape, &bind, vars[0]);
                let mut acc = None;
                for &f in &out.feature_maps {
                    let s = tape.mean_all(f);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, s),
                        None => s,
                    });
                }
                acc.unwrap()
            },
            &[z],
            1e-5,
        );
        assert!(err < 1e-4, "feature gradient err {err}");
    }
}
