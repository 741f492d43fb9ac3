//! Strided, padded convolutions via im2col and dgemm.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Ix3, Ix4, IxDyn};

use super::{BackFn, Tape, Var};

/// Output length of a 1-d convolution.
pub fn conv1d_shape(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(t + 2 * pad >= k, "conv input too short: T={t} K={k} pad={pad}");
    (t + 2 * pad - k) / stride + 1
}

/// Output (height, width) of a 2-d convolution.
pub fn conv2d_shape(
    hw: (usize, usize),
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> (usize, usize) {
    (
        conv1d_shape(hw.0, k.0, stride.0, pad.0),
        conv1d_shape(hw.1, k.1, stride.1, pad.1),
    )
}

fn im2col_1d(x: ArrayView2<f64>, k: usize, stride: usize, pad: usize, tout: usize) -> Array2<f64> {
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let mut cols = Array2::zeros((cin * k, tout));
    for ci in 0..cin {
        for kk in 0..k {
            let row = ci * k + kk;
            for to in 0..tout {
                let ti = (to * stride + kk) as isize - pad as isize;
                if ti >= 0 && (ti as usize) < t {
                    cols[[row, to]] = x[[ci, ti as usize]];
                }
            }
        }
    }
    cols
}

fn col2im_1d(
    cols: ArrayView2<f64>,
    cin: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let tout = cols.shape()[1];
    let mut x = Array2::zeros((cin, t));
    for ci in 0..cin {
        for kk in 0..k {
            let row = ci * k + kk;
            for to in 0..tout {
                let ti = (to * stride + kk) as isize - pad as isize;
                if ti >= 0 && (ti as usize) < t {
                    x[[ci, ti as usize]] += cols[[row, to]];
                }
            }
        }
    }
    x
}

fn im2col_2d(
    x: ArrayView3<f64>,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array2<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::zeros((cin * k.0 * k.1, out.0 * out.1));
    for ci in 0..cin {
        for kh in 0..k.0 {
            for kw in 0..k.1 {
                let row = (ci * k.0 + kh) * k.1 + kw;
                for ho in 0..out.0 {
                    let hi = (ho * stride.0 + kh) as isize - pad.0 as isize;
                    if hi < 0 || hi as usize >= h {
                        continue;
                    }
                    for wo in 0..out.1 {
                        let wi = (wo * stride.1 + kw) as isize - pad.1 as isize;
                        if wi >= 0 && (wi as usize) < w {
                            cols[[row, ho * out.1 + wo]] = x[[ci, hi as usize, wi as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_2d(
    cols: ArrayView2<f64>,
    cin: usize,
    hw: (usize, usize),
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array3<f64> {
    let mut x = Array3::zeros((cin, hw.0, hw.1));
    for ci in 0..cin {
        for kh in 0..k.0 {
            for kw in 0..k.1 {
                let row = (ci * k.0 + kh) * k.1 + kw;
                for ho in 0..out.0 {
                    let hi = (ho * stride.0 + kh) as isize - pad.0 as isize;
                    if hi < 0 || hi as usize >= hw.0 {
                        continue;
                    }
                    for wo in 0..out.1 {
                        let wi = (wo * stride.1 + kw) as isize - pad.1 as isize;
                        if wi >= 0 && (wi as usize) < hw.1 {
                            x[[ci, hi as usize, wi as usize]] += cols[[row, ho * out.1 + wo]];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// 1-d convolution: `x (B,Cin,T)`, `w (Cout,Cin/groups,K)`, optional
    /// per-channel bias `(Cout,)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix3>().expect("conv1d input (B,Cin,T)");
        let wv = self.values[w.0].view().into_dimensionality::<Ix3>().expect("conv1d weight (Cout,Cin/g,K)");
        let (b, cin, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, cin_g, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0, "conv1d group counts");
        assert_eq!(cin / groups, cin_g, "conv1d weight channel mismatch");
        let cout_g = cout / groups;
        let tout = conv1d_shape(t, k, stride, pad);

        let mut out = Array3::zeros((b, cout, tout));
        for bi in 0..b {
            for gi in 0..groups {
                let xs = xv.slice(s![bi, gi * cin_g..(gi + 1) * cin_g, ..]);
                let cols = im2col_1d(xs, k, stride, pad, tout);
                let wg = wv
                    .slice(s![gi * cout_g..(gi + 1) * cout_g, .., ..])
                    .into_shape_with_order((cout_g, cin_g * k))
                    .unwrap()
                    .to_owned();
                out.slice_mut(s![bi, gi * cout_g..(gi + 1) * cout_g, ..])
                    .assign(&wg.dot(&cols));
            }
        }
        if let Some(bv) = bias {
            let bias_v = &self.values[bv.0];
            assert_eq!(bias_v.len(), cout, "conv1d bias length");
            let bcol = bias_v.view().into_shape_with_order(IxDyn(&[1, cout, 1])).unwrap();
            out += &bcol;
        }

        let rx = self.requires[x.0];
        let rw = self.requires[w.0];
        let rb = bias.map(|bv| self.requires[bv.0]).unwrap_or(false);
        let back: Option<BackFn> = Some(Box::new(move |g, vals, gs| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            if rb {
                let db = gv.sum_axis(Axis(2)).sum_axis(Axis(0));
                gs.accum(bias.unwrap().0, db.into_dyn());
            }
            let xv = vals[x.0].view().into_dimensionality::<Ix3>().unwrap();
            let wv = vals[w.0].view().into_dimensionality::<Ix3>().unwrap();
            let mut dw = if rw { Some(Array3::<f64>::zeros(wv.raw_dim())) } else { None };
            let mut dx = if rx { Some(Array3::<f64>::zeros(xv.raw_dim())) } else { None };
            for bi in 0..b {
                for gi in 0..groups {
                    let gy = gv
                        .slice(s![bi, gi * cout_g..(gi + 1) * cout_g, ..])
                        .as_standard_layout()
                        .to_owned();
                    if let Some(dw) = dw.as_mut() {
                        let xs = xv.slice(s![bi, gi * cin_g..(gi + 1) * cin_g, ..]);
                        let cols = im2col_1d(xs, k, stride, pad, tout);
                        let dwg = gy.dot(&cols.t());
                        let mut dst = dw.slice_mut(s![gi * cout_g..(gi + 1) * cout_g, .., ..]);
                        dst += &dwg.into_shape_with_order((cout_g, cin_g, k)).unwrap();
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wg = wv
                            .slice(s![gi * cout_g..(gi + 1) * cout_g, .., ..])
                            .into_shape_with_order((cout_g, cin_g * k))
                            .unwrap()
                            .to_owned();
                        let dcols = wg.t().dot(&gy);
                        let dxg = col2im_1d(dcols.view(), cin_g, t, k, stride, pad);
                        let mut dst = dx.slice_mut(s![bi, gi * cin_g..(gi + 1) * cin_g, ..]);
                        dst += &dxg;
                    }
                }
            }
            if let Some(dw) = dw {
                gs.accum(w.0, dw.into_dyn());
            }
            if let Some(dx) = dx {
                gs.accum(x.0, dx.into_dyn());
            }
        }));
        self.push(out.into_dyn(), rx || rw || rb, back)
    }

    /// 2-d convolution: `x (B,Cin,H,W)`, `w (Cout,Cin,Kh,Kw)`, optional
    /// per-channel bias. No grouping.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().expect("conv2d input (B,C,H,W)");
        let wv = self.values[w.0].view().into_dimensionality::<Ix4>().expect("conv2d weight (Cout,Cin,Kh,Kw)");
        let (b, cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, wcin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let out_hw = conv2d_shape((h, wdt), (kh, kw), stride, pad);

        let wmat = wv.into_shape_with_order((cout, cin * kh * kw)).unwrap().to_owned();
        let mut out = ndarray::Array4::zeros((b, cout, out_hw.0, out_hw.1));
        for bi in 0..b {
            let cols = im2col_2d(xv.index_axis(Axis(0), bi), (kh, kw), stride, pad, out_hw);
            let y = wmat.dot(&cols);
            out.index_axis_mut(Axis(0), bi)
                .assign(&y.into_shape_with_order((cout, out_hw.0, out_hw.1)).unwrap());
        }
        if let Some(bv) = bias {
            let bias_v = &self.values[bv.0];
            assert_eq!(bias_v.len(), cout, "conv2d bias length");
            let bcol = bias_v.view().into_shape_with_order(IxDyn(&[1, cout, 1, 1])).unwrap();
            out += &bcol;
        }

        let rx = self.requires[x.0];
        let rw = self.requires[w.0];
        let rb = bias.map(|bv| self.requires[bv.0]).unwrap_or(false);
        let back: Option<BackFn> = Some(Box::new(move |g, vals, gs| {
            let gv = g.view().into_dimensionality::<Ix4>().unwrap();
            if rb {
                let db = gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                gs.accum(bias.unwrap().0, db.into_dyn());
            }
            let xv = vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
            let wv = vals[w.0].view().into_dimensionality::<Ix4>().unwrap();
            let wmat = wv.into_shape_with_order((cout, cin * kh * kw)).unwrap().to_owned();
            let mut dw = if rw { Some(Array2::<f64>::zeros((cout, cin * kh * kw))) } else { None };
            let mut dx = if rx { Some(ndarray::Array4::<f64>::zeros(xv.raw_dim())) } else { None };
            for bi in 0..b {
                let gy = gv
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((cout, out_hw.0 * out_hw.1))
                    .unwrap()
                    .to_owned();
                if let Some(dw) = dw.as_mut() {
                    let cols = im2col_2d(xv.index_axis(Axis(0), bi), (kh, kw), stride, pad, out_hw);
                    *dw += &gy.dot(&cols.t());
                }
                if let Some(dx) = dx.as_mut() {
                    let dcols = wmat.t().dot(&gy);
                    let dxi = col2im_2d(dcols.view(), cin, (h, wdt), (kh, kw), stride, pad, out_hw);
                    let mut dst = dx.index_axis_mut(Axis(0), bi);
                    dst += &dxi;
                }
            }
            if let Some(dw) = dw {
                gs.accum(w.0, dw.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn());
            }
            if let Some(dx) = dx {
                gs.accum(x.0, dx.into_dyn());
            }
        }));
        self.push(out.into_dyn(), rx || rw || rb, back)
    }
}
