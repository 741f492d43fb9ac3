//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Values are `f64` dense arrays (`ndarray::ArrayD`). Every op records a
//! closure that routes the output gradient to its inputs; `Tape::backward`
//! replays them in reverse insertion order. All computation is sequential
//! and allocation order is fixed, so results are bitwise reproducible.

mod conv;
mod ops;

pub mod check;

#[cfg(test)]
mod tests;

pub use conv::{conv1d_shape, conv2d_shape};

use ndarray::ArrayD;

pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Arr, &[Arr], &mut GradStore)>;

/// Backward closure signature for ops defined outside this module:
/// (output gradient, all node values, gradient store).
pub type ExternalBackFn = BackFn;

/// Gradient accumulator keyed by tape node index.
pub struct GradStore {
    slots: Vec<Option<Arr>>,
}

impl GradStore {
    pub fn grad(&self, v: Var) -> Option<&Arr> {
        self.slots[v.0].as_ref()
    }

    pub(crate) fn accum(&mut self, id: usize, g: Arr) {
        match &mut self.slots[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulate a gradient into a node, for externally defined ops.
    pub fn accum_var(&mut self, v: Var, g: Arr) {
        self.accum(v.0, g);
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Arr>,
    requires: Vec<bool>,
    backs: Vec<Option<BackFn>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, true, None)
    }

    /// Non-differentiable input node; backward never reaches it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, false, None)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.values[v.0]
    }

    /// Value of a single-element node as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.values[v.0];
        assert_eq!(val.len(), 1, "scalar() on node with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Register a node whose forward value and backward closure were built
    /// outside this module (MDCT and friends).
    pub fn push_external(&mut self, value: Arr, requires: bool, back: Option<ExternalBackFn>) -> Var {
        self.push(value, requires, back)
    }

    pub(crate) fn push(&mut self, value: Arr, requires: bool, back: Option<BackFn>) -> Var {
        debug_assert!(value.is_standard_layout(), "tape values must be standard layout");
        self.values.push(value);
        self.requires.push(requires);
        self.backs.push(if requires { back } else { None });
        Var(self.values.len() - 1)
    }

    /// Backward pass from a scalar root. Returns gradients for leaf nodes;
    /// intermediate gradients are consumed as the sweep passes them.
    pub fn backward(&self, root: Var) -> GradStore {
        let root_val = &self.values[root.0];
        assert_eq!(root_val.len(), 1, "backward root must be scalar");
        assert!(self.requires[root.0], "backward root does not require grad");
        let mut gs = GradStore { slots: vec![None; self.values.len()] };
        gs.slots[root.0] = Some(Arr::ones(root_val.raw_dim()));
        for id in (0..=root.0).rev() {
            if let Some(back) = &self.backs[id] {
                if let Some(g) = gs.slots[id].take() {
                    back(&g, &self.values, &mut gs);
                }
            }
        }
        gs
    }
}
