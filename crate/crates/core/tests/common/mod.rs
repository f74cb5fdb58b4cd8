#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trendlab::nn::Forecaster;
use trendlab::numerics::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&Graph, &[Var]) -> Var) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    g.value(f(&g, &vars)).item()
}

/// Relative gap `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Gradients smaller than this in both estimates are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Largest relative gap between the tape gradient and a central difference
/// with step `h`, over every element of every input.
pub fn max_gradient_error(inputs: &[Tensor], h: f64, f: &dyn Fn(&Graph, &[Var]) -> Var) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&g, &vars);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Weighted sum `Σ w_i · y_i` with fixed pseudo-random weights, so every
/// output element contributes a distinct amount to the loss.
pub fn probe(g: &Graph, y: Var) -> Var {
    let shape = g.shape(y);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.4).collect();
    let w = g.constant(Tensor::new(shape, w).unwrap());
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Worst relative error between backprop and central-difference gradients
/// of the MSE loss over every parameter of `model`.
pub fn model_gradient_error(model: &mut dyn Forecaster, x: &Tensor, target: &Tensor, h: f64) -> f64 {
    let loss_of = |m: &dyn Forecaster, with_grad: bool| {
        let g = Graph::new();
        let p = m.params().bind(&g, with_grad);
        let y = m.forward(&g, &p, g.constant(x.clone())).unwrap();
        let l = trendlab::numerics::mse(&g, y, g.constant(target.clone())).unwrap();
        let value = g.value(l).item();
        if with_grad {
            g.backward(l).unwrap();
            (value, m.params().gradients(&g, &p))
        } else {
            (value, Vec::new())
        }
    };
    let (_, grads) = loss_of(model, true);
    let mut worst: f64 = 0.0;
    for pi in 0..model.params().len() {
        for i in 0..model.params().values()[pi].len() {
            let orig = model.params().values()[pi].data()[i];
            model.params_mut().values_mut()[pi].data_mut()[i] = orig + h;
            let up = loss_of(model, false).0;
            model.params_mut().values_mut()[pi].data_mut()[i] = orig - h;
            let down = loss_of(model, false).0;
            model.params_mut().values_mut()[pi].data_mut()[i] = orig;
            worst = worst.max(relative_error(grads[pi].data()[i], (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// `n` windows of length `l` with values in `[-1, 1)`, shaped `[n, l, 1]`.
pub fn random_windows(n: usize, l: usize, seed: u64) -> Tensor {
    random_tensor(&[n, l, 1], 1.0, &mut rng(seed))
}
