//! Helpers shared by the integration tests.
#![allow(dead_code)]

use poelic::autograd::{Graph, Var};
use poelic::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, &mut rng(seed))
}

/// Central-difference check of `f` at `input`.
///
/// Returns the largest per-coordinate relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, where the
/// floor is 1e-3 of the largest analytic component, so that coordinates with
/// vanishing gradient are compared on the gradient's own scale.
pub fn fd_max_rel_error<F>(input: &Tensor<f64>, step: f64, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
{
    let analytic = {
        let g = Graph::new();
        let x = g.leaf(input.clone());
        let loss = f(&g, x);
        g.backward(loss).get_or_zeros(x)
    };
    let eval = |t: Tensor<f64>| {
        let g = Graph::new();
        let x = g.constant(t);
        f(&g, x).item()
    };
    let floor = 1e-3 * analytic.max_abs().max(1e-300);
    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
