//! Parameter management, layers, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] (name + dense array). Before a
//! forward pass the store is bound onto a tape, either as trainable leaves
//! or as constants (frozen nets, discriminator during the generator step).

use std::collections::BTreeMap;

use ndarray::{Array, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Arr, GradStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Arr)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, init: Arr) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| n != &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, init));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.entries[id.0].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    /// Put every parameter on the tape, as leaves (trainable) or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|(_, a)| {
                if trainable {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Arr)> {
        self.entries
            .iter()
            .map(|(n, a)| (format!("{prefix}{n}"), a.clone()))
            .collect()
    }

    /// Restore parameter values from named tensors. Every parameter must be
    /// present under `prefix` with a matching shape.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Arr>, prefix: &str) -> Result<()> {
        for (name, value) in &mut self.entries {
            let key = format!("{prefix}{name}");
            let src = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            value.assign(src);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes, and little-endian payloads, in allocation
    /// order. Used to pin frozen components.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// U(-s, s) with s = 1/sqrt(fan_in).
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..s)).collect();
    Array::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn init_zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn init_const(shape: &[usize], v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(shape), v)
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = ps.alloc(format!("{name}.w"), init_uniform(rng, &[in_features, out_features], in_features));
        let b = ps.alloc(format!("{name}.b"), init_zeros(&[out_features]));
        Self { w, b, in_features, out_features }
    }

    /// `(N, in) -> (N, out)`.
    pub fn forward(&self, t: &mut Tape, bind: &Binding, x: Var) -> Var {
        let y = t.matmul(x, bind.var(self.w));
        t.add_row_bias(y, bind.var(self.b))
    }
}

pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        assert!(cin % groups == 0 && cout % groups == 0);
        let fan_in = cin / groups * k;
        let w = ps.alloc(format!("{name}.w"), init_uniform(rng, &[cout, cin / groups, k], fan_in));
        let b = ps.alloc(format!("{name}.b"), init_zeros(&[cout]));
        Self { w, b, stride, pad, groups }
    }

    pub fn forward(&self, t: &mut Tape, bind: &Binding, x: Var) -> Var {
        t.conv1d(x, bind.var(self.w), Some(bind.var(self.b)), self.stride, self.pad, self.groups)
    }
}

pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let fan_in = cin * k.0 * k.1;
        let w = ps.alloc(format!("{name}.w"), init_uniform(rng, &[cout, cin, k.0, k.1], fan_in));
        let b = ps.alloc(format!("{name}.b"), init_zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, bind: &Binding, x: Var) -> Var {
        t.conv2d(x, bind.var(self.w), Some(bind.var(self.b)), self.stride, self.pad)
    }
}

/// LayerNorm over the channel axis of `(B,C,T)`.
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl ChannelNorm {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = ps.alloc(format!("{name}.gamma"), init_const(&[c], 1.0));
        let beta = ps.alloc(format!("{name}.beta"), init_zeros(&[c]));
        Self { gamma, beta, eps: 1e-6 }
    }

    pub fn forward(&self, t: &mut Tape, bind: &Binding, x: Var) -> Var {
        t.channel_layer_norm(x, bind.var(self.gamma), bind.var(self.beta), self.eps)
    }
}

pub struct Grn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Grn {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = ps.alloc(format!("{name}.gamma"), init_zeros(&[c]));
        let beta = ps.alloc(format!("{name}.beta"), init_zeros(&[c]));
        Self { gamma, beta, eps: 1e-6 }
    }

    pub fn forward(&self, t: &mut Tape, bind: &Binding, x: Var) -> Var {
        t.grn(x, bind.var(self.gamma), bind.var(self.beta), self.eps)
    }
}

/// ConvNeXt-V2 style 1-d block on `(B,H,T)`: depthwise 7-tap conv, channel
/// LayerNorm, pointwise expansion x4, GELU, GRN, pointwise projection, and a
/// residual gated by a per-channel scale initialized near zero, so the block
/// is approximately the identity at the start of training.
pub struct ConvNeXtBlock {
    dw: Conv1dLayer,
    norm: ChannelNorm,
    pw1: Conv1dLayer,
    grn: Grn,
    pw2: Conv1dLayer,
    gain: ParamId,
}

pub const BLOCK_GAIN_INIT: f64 = 1e-4;

impl ConvNeXtBlock {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, h: usize) -> Self {
        let dw = Conv1dLayer::new(ps, rng, &format!("{name}.dw"), h, h, 7, 1, 3, h);
        let norm = ChannelNorm::new(ps, &format!("{name}.norm"), h);
        let pw1 = Conv1dLayer::new(ps, rng, &format!("{name}.pw1"), h, 4 * h, 1, 1, 0, 1);
        let grn = Grn::new(ps, &format!("{name}.grn"), 4 * h);
        let pw2 = Conv1dLayer::new(ps, rng, &format!("{name}.pw2"), 4 * h, h, 1, 1, 0, 1);
        let gain = ps.alloc(format!("{name}.gain"), init_const(&[h], BLOCK_GAIN_INIT));
        Self { dw, norm, pw1, grn, pw2, gain }
    }

    pub fn forward(&self, t: &mut Tape, bind: &Binding, x: Var) -> Var {
        let y = self.dw.forward(t, bind, x);
        let y = self.norm.forward(t, bind, y);
        let y = self.pw1.forward(t, bind, y);
        let y = t.gelu(y);
        let y = self.grn.forward(t, bind, y);
        let y = self.pw2.forward(t, bind, y);
        let y = t.mul_channel(y, bind.var(self.gain));
        t.add(x, y)
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, a)| Arr::zeros(a.raw_dim())).collect();
        let v = store.iter().map(|(_, a)| Arr::zeros(a.raw_dim())).collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in the store. Parameters whose tape
    /// node received no gradient are treated as having zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, binding: &Binding, grads: &GradStore) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for i in 0..store.len() {
            let id = ParamId(i);
            let g_owned;
            let g: &Arr = match grads.grad(binding.var(id)) {
                Some(g) => g,
                None => {
                    g_owned = Arr::zeros(store.get(id).raw_dim());
                    &g_owned
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g);
            let lr = self.cfg.lr;
            let eps = self.cfg.eps;
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Arr)> {
        let mut out = vec![(
            format!("{prefix}step"),
            ndarray::arr0(self.step as f64).into_dyn(),
        )];
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("{prefix}m.{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("{prefix}v.{i}"), v.clone()));
        }
        out
    }

    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Arr>, prefix: &str) -> Result<()> {
        let step = tensors
            .get(&format!("{prefix}step"))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}step")))?;
        self.step = step.iter().next().copied().unwrap_or(0.0) as u64;
        for (i, m) in self.m.iter_mut().enumerate() {
            let key = format!("{prefix}m.{i}");
            let src = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if src.shape() != m.shape() {
                return Err(Error::Checkpoint(format!("tensor {key} shape mismatch")));
            }
            m.assign(src);
        }
        for (i, v) in self.v.iter_mut().enumerate() {
            let key = format!("{prefix}v.{i}");
            let src = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if src.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("tensor {key} shape mismatch")));
            }
            v.assign(src);
        }
        Ok(())
    }
}
