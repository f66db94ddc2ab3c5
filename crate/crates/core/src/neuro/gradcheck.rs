//! Central finite-difference gradient checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{Mat, Tape, Var};

pub const STEP: f64 = 1e-5;

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn evaluate(inputs: &[Mat], build: &impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.scalar(out)
}

/// Finite-difference gradient of a scalar function of `inputs`.
pub fn numeric(inputs: &[Mat], build: &impl Fn(&mut Tape, &[Var]) -> Var) -> Vec<Mat> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Mat::zeros(inputs[k].dim());
        for idx in 0..inputs[k].len() {
            let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let orig = work[k][[r, c]];
            work[k][[r, c]] = orig + STEP;
            let plus = evaluate(&work, build);
            work[k][[r, c]] = orig - STEP;
            let minus = evaluate(&work, build);
            work[k][[r, c]] = orig;
            g[[r, c]] = (plus - minus) / (2.0 * STEP);
        }
        grads.push(g);
    }
    grads
}

/// Reverse-mode gradient of a scalar function of `inputs`.
pub fn analytic(inputs: &[Mat], build: &impl Fn(&mut Tape, &[Var]) -> Var) -> Vec<Mat> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);
    vars.iter().zip(inputs).map(|(v, m)| grads.get_or_zeros(*v, m.dim())).collect()
}

/// Relative error `|g_a - g_n| / max(|g_a|, |g_n|)` in the Euclidean norm,
/// per input; absolute error when both gradients are below `1e-8`.
pub fn relative_error(a: &Mat, n: &Mat) -> f64 {
    let diff = (a - n).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(n.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error over all inputs.
pub fn check(inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let a = analytic(inputs, &build);
    let n = numeric(inputs, &build);
    a.iter().zip(&n).map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max)
}
