//! Tape operations.
//!
//! Shape rules are enforced with panics: a mismatch here is a programming
//! error in model code, not a user-facing condition. Public model APIs
//! validate their inputs before touching the tape.

use ndarray::{Array1, Array2, Axis, Ix1, Ix2, IxDyn, Slice};

use super::{Arr, BackFn, GradStore, Tape, Var};

const NORM_EPS: f64 = 1e-12;

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl Tape {
    fn unary(
        &mut self,
        a: Var,
        out: Arr,
        back: impl Fn(&Arr, &[Arr], usize) -> Arr + 'static,
    ) -> Var {
        let req = self.requires[a.0];
        let back_fn: Option<BackFn> = if req {
            Some(Box::new(move |g, vals, gs: &mut GradStore| {
                gs.accum(a.0, back(g, vals, a.0));
            }))
        } else {
            None
        };
        self.push(out, req, back_fn)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "add shape mismatch");
        let out = &self.values[a.0] + &self.values[b.0];
        let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
        let back: Option<BackFn> = Some(Box::new(move |g, _vals, gs| {
            if ra {
                gs.accum(a.0, g.clone());
            }
            if rb {
                gs.accum(b.0, g.clone());
            }
        }));
        self.push(out, ra || rb, back)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "sub shape mismatch");
        let out = &self.values[a.0] - &self.values[b.0];
        let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
        let back: Option<BackFn> = Some(Box::new(move |g, _vals, gs| {
            if ra {
                gs.accum(a.0, g.clone());
            }
            if rb {
                gs.accum(b.0, -g);
            }
        }));
        self.push(out, ra || rb, back)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "mul shape mismatch");
        let out = &self.values[a.0] * &self.values[b.0];
        let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
        let back: Option<BackFn> = Some(Box::new(move |g, vals, gs| {
            if ra {
                gs.accum(a.0, g * &vals[b.0]);
            }
            if rb {
                gs.accum(b.0, g * &vals[a.0]);
            }
        }));
        self.push(out, ra || rb, back)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "div shape mismatch");
        let out = &self.values[a.0] / &self.values[b.0];
        let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
        let back: Option<BackFn> = Some(Box::new(move |g, vals, gs| {
            if ra {
                gs.accum(a.0, g / &vals[b.0]);
            }
            if rb {
                let bb = &vals[b.0];
                gs.accum(b.0, -(g * &vals[a.0]) / (bb * bb));
            }
        }));
        self.push(out, ra || rb, back)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = -&self.values[a.0];
        self.unary(a, out, |g, _, _| -g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = &self.values[a.0] * c;
        self.unary(a, out, move |g, _, _| g * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = &self.values[a.0] + c;
        self.unary(a, out, |g, _, _| g.clone())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(f64::exp);
        self.unary(a, out.clone(), {
            move |g, _, _| g * &out
        })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(f64::ln);
        self.unary(a, out, |g, vals, id| g / &vals[id])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(f64::sqrt);
        self.unary(a, out.clone(), move |g, _, _| g / (&out * 2.0).mapv(|v| v.max(NORM_EPS)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|v| v * v);
        self.unary(a, out, |g, vals, id| g * &vals[id] * 2.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(f64::abs);
        self.unary(a, out, |g, vals, id| g * &vals[id].mapv(|v| v.signum() * f64::from(v != 0.0)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.values[a.0].mapv(|v| if v > 0.0 { v } else { slope * v });
        self.unary(a, out, move |g, vals, id| {
            g * &vals[id].mapv(|v| if v > 0.0 { 1.0 } else { slope })
        })
    }

    /// GELU, tanh approximation. The backward is the exact derivative of the
    /// approximation itself.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044_715;
        let out = self.values[a.0].mapv(|x| {
            let u = C * (x + K * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.unary(a, out, |g, vals, id| {
            g * &vals[id].mapv(|x| {
                let u = C * (x + K * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x)
            })
        })
    }

    /// Elementwise product with a constant broadcastable to `a`'s shape.
    pub fn mul_bcast_const(&mut self, a: Var, c: &Arr) -> Var {
        let shape = IxDyn(self.values[a.0].shape());
        let cb = c
            .broadcast(shape.clone())
            .unwrap_or_else(|| panic!("mul_bcast_const: {:?} not broadcastable to {:?}", c.shape(), shape))
            .to_owned();
        let out = &self.values[a.0] * &cb;
        self.unary(a, out, move |g, _, _| g * &cb)
    }

    /// `x (B,C,T) * v (C)`, broadcasting `v` over batch and time. `v` is a
    /// tape node (layer-scale gains).
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Var {
        let xv = &self.values[x.0];
        let vv = &self.values[v.0];
        assert_eq!(xv.ndim(), 3, "mul_channel expects (B,C,T)");
        assert_eq!(vv.ndim(), 1, "mul_channel gains must be 1-d");
        assert_eq!(xv.shape()[1], vv.len(), "mul_channel channel mismatch");
        let vcol = vv.view().into_shape_with_order(IxDyn(&[1, vv.len(), 1])).unwrap();
        let out = xv * &vcol;
        let (rx, rv) = (self.requires[x.0], self.requires[v.0]);
        let back: Option<BackFn> = Some(Box::new(move |g, vals, gs| {
            if rx {
                let vv = &vals[v.0];
                let vcol = vv.view().into_shape_with_order(IxDyn(&[1, vv.len(), 1])).unwrap();
                gs.accum(x.0, g * &vcol);
            }
            if rv {
                let prod = g * &vals[x.0];
                let dv = prod.sum_axis(Axis(2)).sum_axis(Axis(0));
                gs.accum(v.0, dv.into_dyn());
            }
        }));
        self.push(out, rx || rv, back)
    }

    /// `x (N,F) + b (F)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.values[x.0];
        let bv = &self.values[b.0];
        assert_eq!(xv.ndim(), 2, "add_row_bias expects 2-d input");
        assert_eq!(bv.ndim(), 1, "add_row_bias bias must be 1-d");
        assert_eq!(xv.shape()[1], bv.len(), "add_row_bias width mismatch");
        let brow = bv.view().into_shape_with_order(IxDyn(&[1, bv.len()])).unwrap();
        let out = xv + &brow;
        let (rx, rb) = (self.requires[x.0], self.requires[b.0]);
        let back: Option<BackFn> = Some(Box::new(move |g, _vals, gs| {
            if rx {
                gs.accum(x.0, g.clone());
            }
            if rb {
                gs.accum(b.0, g.sum_axis(Axis(0)).into_dyn());
            }
        }));
        self.push(out, rx || rb, back)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = ndarray::arr0(self.values[a.0].sum()).into_dyn();
        self.unary(a, out, |g, vals, id| {
            let gv = *g.iter().next().unwrap();
            Arr::from_elem(vals[id].raw_dim(), gv)
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let av = &self.values[a.0];
        assert!(axis < av.ndim(), "sum_axis: axis out of range");
        let out = av.sum_axis(Axis(axis));
        self.unary(a, out.into_dyn(), move |g, vals, id| {
            let shape = IxDyn(vals[id].shape());
            g.clone()
                .insert_axis(Axis(axis))
                .broadcast(shape)
                .unwrap()
                .to_owned()
        })
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.values[a.0].shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Sum over all axes except the first: `(B, ..) -> (B,)`.
    pub fn sum_per_item(&mut self, a: Var) -> Var {
        let av = &self.values[a.0];
        let b = av.shape()[0];
        let flat = av.len() / b.max(1);
        let out = av
            .view()
            .into_shape_with_order(IxDyn(&[b, flat]))
            .unwrap()
            .sum_axis(Axis(1));
        self.unary(a, out.into_dyn(), move |g, vals, id| {
            let shape = IxDyn(vals[id].shape());
            g.view()
                .into_shape_with_order(IxDyn(&[b, 1]))
                .unwrap()
                .broadcast(IxDyn(&[b, flat]))
                .unwrap()
                .to_owned()
                .into_shape_with_order(shape)
                .unwrap()
        })
    }

    pub fn mean_per_item(&mut self, a: Var) -> Var {
        let b = self.values[a.0].shape()[0];
        let n = (self.values[a.0].len() / b.max(1)) as f64;
        let s = self.sum_per_item(a);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm per leading-axis item: `(B, ..) -> (B,)`.
    pub fn l2_per_item(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let ssum = self.sum_per_item(sq);
        self.sqrt(ssum)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = &self.values[a.0];
        assert_eq!(av.len(), shape.iter().product::<usize>(), "reshape element count mismatch");
        let out = av.view().into_shape_with_order(IxDyn(shape)).unwrap().to_owned();
        self.unary(a, out, |g, vals, id| {
            g.view()
                .into_shape_with_order(IxDyn(vals[id].shape()))
                .unwrap()
                .to_owned()
        })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let av = &self.values[a.0];
        assert_eq!(av.ndim(), axes.len(), "permute rank mismatch");
        let out = av.view().permuted_axes(axes.to_vec()).as_standard_layout().to_owned();
        let inv = inverse_axes(axes);
        self.unary(a, out, move |g, _, _| {
            g.view().permuted_axes(inv.clone()).as_standard_layout().to_owned()
        })
    }

    pub fn slice_axis_op(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let av = &self.values[a.0];
        assert!(axis < av.ndim() && start <= end && end <= av.shape()[axis], "slice out of range");
        let out = av
            .slice_axis(Axis(axis), Slice::from(start..end))
            .as_standard_layout()
            .to_owned();
        self.unary(a, out, move |g, vals, id| {
            let mut dx = Arr::zeros(IxDyn(vals[id].shape()));
            dx.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(g);
            dx
        })
    }

    /// `(M,K) x (K,N)` matrix product, both operands on the tape.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let bv = self.values[b.0].view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dim mismatch");
        let out = av.dot(&bv).into_dyn();
        let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
        let back: Option<BackFn> = Some(Box::new(move |g, vals, gs| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            if ra {
                let bv = vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
                gs.accum(a.0, g2.dot(&bv.t()).into_dyn());
            }
            if rb {
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                gs.accum(b.0, av.t().dot(&g2).into_dyn());
            }
        }));
        self.push(out, ra || rb, back)
    }

    /// LayerNorm over the channel axis of `(B,C,T)`, one statistic per (b,t).
    pub fn channel_layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.values[x.0];
        assert_eq!(xv.ndim(), 3, "channel_layer_norm expects (B,C,T)");
        let c = xv.shape()[1];
        assert_eq!(self.values[gamma.0].len(), c, "gamma length");
        assert_eq!(self.values[beta.0].len(), c, "beta length");

        let mean = xv.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let gv = &self.values[gamma.0];
        let gcol = gv.view().into_shape_with_order(IxDyn(&[1, c, 1])).unwrap();
        let bv = &self.values[beta.0];
        let bcol = bv.view().into_shape_with_order(IxDyn(&[1, c, 1])).unwrap();
        let out = &xhat * &gcol + &bcol;

        let (rx, rg, rb) = (self.requires[x.0], self.requires[gamma.0], self.requires[beta.0]);
        let back: Option<BackFn> = Some(Box::new(move |g, vals, gs| {
            if rb {
                gs.accum(beta.0, g.sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn());
            }
            if rg {
                let dg = (g * &xhat).sum_axis(Axis(2)).sum_axis(Axis(0));
                gs.accum(gamma.0, dg.into_dyn());
            }
            if rx {
                let gv = &vals[gamma.0];
                let gcol = gv.view().into_shape_with_order(IxDyn(&[1, gv.len(), 1])).unwrap();
                let gy = g * &gcol; // dL/dxhat
                let m1 = gy.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                let m2 = (&gy * &xhat).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                let dx = (&gy - &m1 - &xhat * &m2) * &inv_std;
                gs.accum(x.0, dx);
            }
        }));
        self.push(out, rx || rg || rb, back)
    }

    /// Global response normalization (ConvNeXt-V2) over `(B,C,T)`:
    /// per-channel L2 energy along time, divisively normalized across
    /// channels, with learned gain/bias and an identity shortcut.
    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.values[x.0];
        assert_eq!(xv.ndim(), 3, "grn expects (B,C,T)");
        let c = xv.shape()[1];
        assert_eq!(self.values[gamma.0].len(), c, "gamma length");
        assert_eq!(self.values[beta.0].len(), c, "beta length");

        // G (B,C): ||x_{b,c,.}||_2 ; N = G / (mean_c G + eps)
        let gx = xv.mapv(|v| v * v).sum_axis(Axis(2)).mapv(f64::sqrt);
        let mb = gx.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1)) + eps;
        let nx = &gx / &mb;
        let nx3 = nx.clone().insert_axis(Axis(2));
        let gv = &self.values[gamma.0];
        let gcol = gv.view().into_shape_with_order(IxDyn(&[1, c, 1])).unwrap();
        let bv = &self.values[beta.0];
        let bcol = bv.view().into_shape_with_order(IxDyn(&[1, c, 1])).unwrap();
        let scaled = xv * &nx3;
        let out = &scaled * &gcol + &bcol + xv;

        let (rx, rg, rb) = (self.requires[x.0], self.requires[gamma.0], self.requires[beta.0]);
        let back: Option<BackFn> = Some(Box::new(move |g, vals, gs| {
            if rb {
                gs.accum(beta.0, g.sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn());
            }
            if rg {
                let dg = (g * &scaled).sum_axis(Axis(2)).sum_axis(Axis(0));
                gs.accum(gamma.0, dg.into_dyn());
            }
            if rx {
                let xval = &vals[x.0];
                let gv = &vals[gamma.0];
                let gcol = gv.view().into_shape_with_order(IxDyn(&[1, gv.len(), 1])).unwrap();
                let gg = g * &gcol; // dL/d(scaled)
                // P (B,C) = sum_t gg * x ; dL/dN
                let p = (&gg * xval).sum_axis(Axis(2));
                // dL/dG = P/M - (sum_c P*G) / (C*M^2)
                let s = (&p * &gx).sum_axis(Axis(1)).insert_axis(Axis(1));
                let cn = gx.shape()[1] as f64;
                let dgx = &p / &mb - &s / (&mb * &mb * cn);
                let gxsafe = gx.mapv(|v| v.max(NORM_EPS)).insert_axis(Axis(2));
                let dx = &gg * &nx3 + dgx.insert_axis(Axis(2)) * (xval / &gxsafe) + g;
                gs.accum(x.0, dx);
            }
        }));
        self.push(out, rx || rg || rb, back)
    }

    /// Row-wise log-sum-exp: `(B,N) -> (B,)`, max-shifted for stability.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().expect("logsumexp 2-d");
        let maxes: Array1<f64> = av.rows().into_iter().map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).collect();
        let mut out = Array1::zeros(av.shape()[0]);
        for (i, row) in av.rows().into_iter().enumerate() {
            let m = maxes[i];
            out[i] = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        }
        let out_c = out.clone();
        self.unary(a, out.into_dyn(), move |g, vals, id| {
            let av = vals[id].view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array2::zeros((av.shape()[0], av.shape()[1]));
            for (i, row) in av.rows().into_iter().enumerate() {
                let gi = g[IxDyn(&[i])];
                let l = out_c[i];
                for (j, &v) in row.iter().enumerate() {
                    dx[[i, j]] = gi * (v - l).exp();
                }
            }
            dx.into_dyn()
        })
    }

    /// Normalize each row of `(B,H)` to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().expect("row_normalize 2-d");
        let norms: Array1<f64> = av.rows().into_iter().map(|r| r.dot(&r).sqrt().max(NORM_EPS)).collect();
        let out = &av / &norms.view().insert_axis(Axis(1));
        let norms_c = norms.clone();
        let out_c = out.clone();
        self.unary(a, out.into_dyn(), move |g, _, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array2::zeros(g2.raw_dim());
            for i in 0..g2.shape()[0] {
                let yi = out_c.row(i);
                let gi = g2.row(i);
                let dot = gi.dot(&yi);
                for j in 0..g2.shape()[1] {
                    dx[[i, j]] = (gi[j] - yi[j] * dot) / norms_c[i];
                }
            }
            dx.into_dyn()
        })
    }

    /// Diagonal of a square `(B,B)` matrix as `(B,)`.
    pub fn diag2(&mut self, a: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().expect("diag2 2-d");
        assert_eq!(av.shape()[0], av.shape()[1], "diag2 expects square input");
        let out: Array1<f64> = (0..av.shape()[0]).map(|i| av[[i, i]]).collect();
        self.unary(a, out.into_dyn(), |g, vals, id| {
            let mut dx = Arr::zeros(IxDyn(vals[id].shape()));
            let gd = g.view().into_dimensionality::<Ix1>().unwrap();
            for i in 0..gd.len() {
                dx[IxDyn(&[i, i])] = gd[i];
            }
            dx
        })
    }

    /// Weighted sum of same-shaped nodes: `sum_i w_i * v_i`.
    pub fn linear_combination(&mut self, terms: &[(f64, Var)]) -> Var {
        assert!(!terms.is_empty(), "linear_combination needs at least one term");
        let mut acc = self.scale(terms[0].1, terms[0].0);
        for &(w, v) in &terms[1..] {
            let t = self.scale(v, w);
            acc = self.add(acc, t);
        }
        acc
    }
}
