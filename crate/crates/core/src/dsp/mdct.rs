//! Orthonormal MDCT with sine window.
//!
//! The transform pads the signal to a multiple of the hop M, extends it with
//! M zeros on both ends, and produces T+1 frames of M coefficients for T
//! hops. With the Princen-Bradley sine window this analysis operator A is an
//! isometry (A'A = I): synthesis with the transposed matrix and overlap-add
//! reconstructs the input exactly, which also makes `analyze` and
//! `synthesize` mutually adjoint - each is the other's backward pass.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Ix2, Ix3};

use crate::autodiff::{ExternalBackFn, Tape, Var};

pub struct Mdct {
    m: usize,
    /// (M, 2M); row f holds w[n] * sqrt(2/M) * cos(pi/M (n + 0.5 + M/2)(f + 0.5)).
    analysis: Array2<f64>,
}

impl Mdct {
    pub fn new(m: usize) -> Self {
        assert!(m >= 2 && m % 2 == 0, "MDCT hop must be even and >= 2");
        let n = 2 * m;
        let scale = (2.0 / m as f64).sqrt();
        let mut analysis = Array2::zeros((m, n));
        for f in 0..m {
            for nn in 0..n {
                let w = (PI * (nn as f64 + 0.5) / n as f64).sin();
                let phase = PI / m as f64 * (nn as f64 + 0.5 + m as f64 / 2.0) * (f as f64 + 0.5);
                analysis[[f, nn]] = scale * w * phase.cos();
            }
        }
        Self { m, analysis }
    }

    pub fn hop(&self) -> usize {
        self.m
    }

    pub fn padded_len(&self, l: usize) -> usize {
        l.div_ceil(self.m) * self.m
    }

    /// Number of MDCT frames for an input of `l` samples: ceil(l/M) + 1.
    pub fn n_frames(&self, l: usize) -> usize {
        self.padded_len(l) / self.m + 1
    }

    /// `(B, L) -> (B, M, F)`.
    pub fn analyze_batch(&self, x: ArrayView2<f64>) -> Array3<f64> {
        let (b, l) = (x.shape()[0], x.shape()[1]);
        let m = self.m;
        let lp = self.padded_len(l);
        let f = lp / m + 1;
        let mut out = Array3::zeros((b, m, f));
        let mut frames = Array2::zeros((2 * m, f));
        for bi in 0..b {
            // Padded buffer: M zeros | signal | pad-to-multiple | M zeros.
            let mut y = Array1::zeros(lp + 2 * m);
            y.slice_mut(s![m..m + l]).assign(&x.row(bi));
            for k in 0..f {
                frames.column_mut(k).assign(&y.slice(s![k * m..k * m + 2 * m]));
            }
            out.slice_mut(s![bi, .., ..]).assign(&self.analysis.dot(&frames));
        }
        out
    }

    /// `(B, M, F) -> (B, l)`; adjoint of `analyze_batch` for the same `l`.
    pub fn synthesize_batch(&self, c: ArrayView3<f64>, l: usize) -> Array2<f64> {
        let (b, mc, f) = (c.shape()[0], c.shape()[1], c.shape()[2]);
        let m = self.m;
        assert_eq!(mc, m, "coefficient channel count");
        assert_eq!(f, self.n_frames(l), "frame count does not match target length");
        let lp = self.padded_len(l);
        let mut out = Array2::zeros((b, l));
        for bi in 0..b {
            let rec = self.analysis.t().dot(&c.slice(s![bi, .., ..])); // (2M, F)
            let mut y = Array1::zeros(lp + 2 * m);
            for k in 0..f {
                let mut seg = y.slice_mut(s![k * m..k * m + 2 * m]);
                seg += &rec.column(k);
            }
            out.row_mut(bi).assign(&y.slice(s![m..m + l]));
        }
        out
    }
}

/// Tape op: MDCT analysis of `(B, L)`. Backward is synthesis.
pub fn tape_mdct(tape: &mut Tape, mdct: &Arc<Mdct>, x: Var) -> Var {
    let xv = tape.value(x).view().into_dimensionality::<Ix2>().expect("mdct input (B,L)");
    let l = xv.shape()[1];
    let out = mdct.analyze_batch(xv).into_dyn();
    let req = tape.requires_grad(x);
    let md = Arc::clone(mdct);
    let back: Option<ExternalBackFn> = Some(Box::new(move |g, _vals, gs| {
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        gs.accum_var(x, md.synthesize_batch(gv, l).into_dyn());
    }));
    tape.push_external(out, req, back)
}

/// Tape op: MDCT synthesis to `out_len` samples. Backward is analysis.
pub fn tape_imdct(tape: &mut Tape, mdct: &Arc<Mdct>, c: Var, out_len: usize) -> Var {
    let cv = tape.value(c).view().into_dimensionality::<Ix3>().expect("imdct input (B,M,F)");
    let out = mdct.synthesize_batch(cv, out_len).into_dyn();
    let req = tape.requires_grad(c);
    let md = Arc::clone(mdct);
    let back: Option<ExternalBackFn> = Some(Box::new(move |g, _vals, gs| {
        let gv = g.view().into_dimensionality::<Ix2>().unwrap();
        gs.accum_var(c, md.analyze_batch(gv).into_dyn());
    }));
    tape.push_external(out, req, back)
}
