use ndarray::{Array, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::check_grads;
use super::{Arr, Tape};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller from two uniforms.
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Array::from_shape_vec(IxDyn(shape), data).unwrap()
}

#[test]
fn elementwise_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]).mapv(|v| v.abs() + 0.5);
    let worst = check_grads(
        |t, vs| {
            let x = t.mul(vs[0], vs[1]);
            let y = t.exp(vs[0]);
            let z = t.div(x, y);
            let w = t.gelu(z);
            t.mean_all(w)
        },
        &[a, b],
        1e-5,
    );
    assert!(worst < 1e-6, "worst rel err {worst}");
}

#[test]
fn conv1d_grouped_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[2, 4, 9]);
    let w = randn(&mut rng, &[4, 2, 3]);
    let bias = randn(&mut rng, &[4]);
    let worst = check_grads(
        |t, vs| {
            let y = t.conv1d(vs[0], vs[1], Some(vs[2]), 2, 1, 2);
            let y = t.leaky_relu(y, 0.2);
            t.mean_all(y)
        },
        &[x, w, bias],
        1e-5,
    );
    assert!(worst < 1e-6, "worst rel err {worst}");
}

#[test]
fn conv2d_strided_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[2, 2, 4, 6]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let bias = randn(&mut rng, &[3]);
    let worst = check_grads(
        |t, vs| {
            let y = t.conv2d(vs[0], vs[1], Some(vs[2]), (1, 2), (1, 1));
            let y = t.square(y);
            t.mean_all(y)
        },
        &[x, w, bias],
        1e-5,
    );
    assert!(worst < 1e-6, "worst rel err {worst}");
}

#[test]
fn fused_norms_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randn(&mut rng, &[2, 5, 4]);
    let gamma = randn(&mut rng, &[5]);
    let beta = randn(&mut rng, &[5]);
    let worst_ln = check_grads(
        |t, vs| {
            let y = t.channel_layer_norm(vs[0], vs[1], vs[2], 1e-6);
            t.mean_all(y)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
        1e-5,
    );
    assert!(worst_ln < 1e-5, "layer norm worst rel err {worst_ln}");
    let worst_grn = check_grads(
        |t, vs| {
            let y = t.grn(vs[0], vs[1], vs[2], 1e-6);
            let y = t.square(y);
            t.mean_all(y)
        },
        &[x, gamma, beta],
        1e-5,
    );
    assert!(worst_grn < 1e-5, "grn worst rel err {worst_grn}");
}

#[test]
fn reductions_and_shapes_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = randn(&mut rng, &[3, 4, 2]);
    let worst = check_grads(
        |t, vs| {
            let p = t.permute(vs[0], &[0, 2, 1]);
            let r = t.reshape(p, &[3, 8]);
            let s = t.slice_axis_op(r, 1, 1, 7);
            let n = t.l2_per_item(s);
            let m = t.mean_axis(n, 0);
            t.sum_all(m)
        },
        &[x],
        1e-5,
    );
    assert!(worst < 1e-6, "worst rel err {worst}");
}

#[test]
fn softmax_style_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = randn(&mut rng, &[4, 6]);
    let worst = check_grads(
        |t, vs| {
            let n = t.row_normalize(vs[0]);
            let nt = t.permute(n, &[1, 0]);
            let sims = t.matmul(n, nt);
            let lse = t.logsumexp_rows(sims);
            let d = t.diag2(sims);
            let gap = t.sub(lse, d);
            t.mean_all(gap)
        },
        &[x],
        1e-5,
    );
    assert!(worst < 1e-6, "worst rel err {worst}");
}

#[test]
fn grad_reuse_accumulates_across_consumers() {
    // f(x) = sum(x*x) + sum(3x) -> df/dx = 2x + 3
    let mut tape = Tape::new();
    let x = tape.leaf(ndarray::arr1(&[1.0, -2.0, 0.5]).into_dyn());
    let sq = tape.mul(x, x);
    let s1 = tape.sum_all(sq);
    let sc = tape.scale(x, 3.0);
    let s2 = tape.sum_all(sc);
    let root = tape.add(s1, s2);
    let gs = tape.backward(root);
    let g = gs.grad(x).unwrap();
    let expect = ndarray::arr1(&[5.0, -1.0, 4.0]).into_dyn();
    assert_eq!(g, &expect);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(ndarray::arr1(&[2.0, 3.0]).into_dyn());
    let c = tape.constant(ndarray::arr1(&[4.0, 5.0]).into_dyn());
    let y = tape.mul(x, c);
    let root = tape.sum_all(y);
    let gs = tape.backward(root);
    assert!(gs.grad(c).is_none());
    assert_eq!(gs.grad(x).unwrap(), &ndarray::arr1(&[4.0, 5.0]).into_dyn());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = randn(&mut rng, &[2, 3, 8]);
    let w = randn(&mut rng, &[4, 3, 3]);
    let run = |x: &Arr, w: &Arr| -> Vec<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let y = t.conv1d(xv, wv, None, 1, 1, 1);
        let y = t.gelu(y);
        let root = t.mean_all(y);
        let gs = t.backward(root);
        let mut out = vec![t.scalar(root)];
        out.extend(gs.grad(xv).unwrap().iter().copied());
        out.extend(gs.grad(wv).unwrap().iter().copied());
        out
    };
    let a = run(&x, &w);
    let b = run(&x, &w);
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn conv_shapes_follow_the_formula() {
    assert_eq!(super::conv1d_shape(10, 3, 1, 1), 10);
    assert_eq!(super::conv1d_shape(10, 2, 1, 0), 9);
    assert_eq!(super::conv1d_shape(9, 2, 1, 1), 10);
    assert_eq!(super::conv2d_shape((4, 47), (3, 3), (1, 2), (1, 1)), (4, 24));
}

#[test]
fn linear_combination_weights_terms() {
    let mut tape = Tape::new();
    let a = tape.leaf(ndarray::arr0(2.0).into_dyn());
    let b = tape.leaf(ndarray::arr0(5.0).into_dyn());
    let c = tape.linear_combination(&[(1.5, a), (-0.5, b)]);
    assert_eq!(tape.scalar(c), 0.5);
    let gs = tape.backward(c);
    assert_eq!(gs.grad(a).unwrap()[IxDyn(&[])], 1.5);
    assert_eq!(gs.grad(b).unwrap()[IxDyn(&[])], -0.5);
}
