//! Central finite-difference gradient checking.

use super::{Arr, Tape, Var};

/// Relative error between analytic and numeric derivatives, with a floor so
/// near-zero pairs compare absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks the gradient of a scalar-valued tape program against central
/// finite differences. `build` must construct the same computation each call
/// from the given leaves. Returns the worst relative error over every input
/// element.
pub fn check_grads(
    mut build: impl FnMut(&mut Tape, &[Var]) -> Var,
    inputs: &[Arr],
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = build(&mut tape, &vars);
    let gs = tape.backward(root);
    let analytic: Vec<Arr> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| gs.grad(*v).cloned().unwrap_or_else(|| Arr::zeros(a.raw_dim())))
        .collect();

    fn eval(ins: &[Arr], build: &mut dyn FnMut(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|a| t.leaf(a.clone())).collect();
        let r = build(&mut t, &vs);
        t.scalar(r)
    }

    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for idx in 0..inputs[i].len() {
            let mut plus: Vec<Arr> = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[idx] += h;
            let mut minus: Vec<Arr> = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[idx] -= h;
            let num = (eval(&plus, &mut build) - eval(&minus, &mut build)) / (2.0 * h);
            let ana = analytic[i].as_slice().unwrap()[idx];
            worst = worst.max(rel_err(ana, num));
        }
    }
    worst
}
