#![allow(dead_code)]

pub mod grad_cases;

use depthforge::{no_grad, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter(shape, uniform(rng, n, lo, hi)).unwrap()
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub coords: usize,
    /// Largest `|a - c| / (|a| + |c| + 1e-12)` over the sampled coordinates.
    pub worst: f64,
    /// `(tensor, element, analytic, numeric)` at the worst coordinate.
    pub at: (usize, usize, f64, f64),
}

/// Largest central-difference step; the ladder halves it down to ~1e-7.
pub const FD_STEP: f64 = 1e-2;
const FD_LEVELS: usize = 18;

/// Central differences `central(h)` on a halving ladder of steps, each pair
/// combined into a fourth-order estimate. Returns the estimate where two
/// consecutive estimates agree best: large steps lose to kinks, small ones to
/// round-off, and the plateau between them is where both are negligible.
pub fn plateau_derivative(mut central: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut d = Vec::with_capacity(FD_LEVELS);
    let mut h = FD_STEP;
    for _ in 0..FD_LEVELS {
        d.push(central(h)?);
        h /= 2.0;
    }
    let r: Vec<f64> = d.windows(2).map(|w| (4.0 * w[1] - w[0]) / 3.0).collect();
    // Three rungs must agree, which keeps chance coincidences in the
    // round-off regime from winning.
    let spread = |w: &[f64]| (w[0] - w[1]).abs().max((w[1] - w[2]).abs());
    let best = r
        .windows(3)
        .enumerate()
        .min_by(|a, b| spread(a.1).total_cmp(&spread(b.1)))
        .map(|(i, _)| i + 1)
        .unwrap_or(0);
    Ok(r[best])
}

/// Relative disagreement as used by the gradient oracle.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Fixed pseudo-random weights for output `index` of a check.
fn output_weights(shape: &[usize], index: usize) -> Result<Tensor<f64>> {
    let mut r = rng(0x5eed ^ index as u64);
    let n = shape.iter().product();
    Tensor::from_vec(shape, uniform(&mut r, n, -1.0, 1.0))
}

/// Samples `coords` (tensor, element) pairs from `inputs`, which must be
/// leaves requiring gradients, and compares reverse-mode gradients of
/// `sum_i <w_i, outputs_i>` (fixed random `w_i`) against extrapolated central
/// differences. Outputs are differenced elementwise before weighting so that
/// round-off in the weighted sum does not swamp small gradients.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    outputs: impl Fn() -> Result<Vec<Tensor<f64>>>,
    coords: usize,
    seed: u64,
) -> Result<GradReport> {
    for x in inputs {
        x.zero_grad();
    }
    let ys = outputs()?;
    let weights = ys
        .iter()
        .enumerate()
        .map(|(i, y)| output_weights(y.shape(), i).map(|w| w.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut objective = Tensor::scalar(0.0);
    for (i, y) in ys.iter().enumerate() {
        objective = objective.add(&y.mul(&output_weights(y.shape(), i)?)?.sum())?;
    }
    objective.backward()?;
    let grads: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.grad().unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut at = (0, 0, 0.0, 0.0);
    for _ in 0..coords {
        let ti = r.gen_range(0..inputs.len());
        let ei = r.gen_range(0..inputs[ti].numel());
        let x = &inputs[ti];
        let orig = x.data()[ei];
        let eval = |v: f64| -> Result<Vec<Vec<f64>>> {
            x.update_data(|d| d[ei] = v);
            no_grad(|| outputs().map(|ys| ys.iter().map(Tensor::to_vec).collect()))
        };
        let numeric = plateau_derivative(|h| {
            let (plus, minus) = (eval(orig + h)?, eval(orig - h)?);
            let mut acc = 0.0;
            for ((p, m), w) in plus.iter().zip(&minus).zip(&weights) {
                acc += p.iter().zip(m).zip(w).map(|((p, m), w)| (p - m) * w).sum::<f64>();
            }
            Ok(acc / (2.0 * h))
        })?;
        x.update_data(|d| d[ei] = orig);
        let e = rel_err(grads[ti][ei], numeric);
        if e > worst {
            worst = e;
            at = (ti, ei, grads[ti][ei], numeric);
        }
    }
    Ok(GradReport { coords, worst, at })
}
