//! Finite-difference gradient checking in double precision.

use crate::{Result, Tape, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// A differentiable scalar function of several tensors.
pub type ScalarFn<'a> = &'a dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

fn perturbed(inputs: &[Tensor<f64>], which: usize, index: usize, delta: f64) -> Result<Vec<Tensor<f64>>> {
    inputs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            if k == which {
                let mut v = t.to_vec();
                v[index] += delta;
                Tensor::from_vec(t.shape().to_vec(), v)
            } else {
                Ok(t.detach())
            }
        })
        .collect()
}

/// Central finite differences of `f` with respect to every input element.
pub fn numeric_grads(f: &dyn Fn(&[Tensor<f64>]) -> Result<f64>, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let up = f(&perturbed(inputs, i, j, STEP)?)?;
            let down = f(&perturbed(inputs, i, j, -STEP)?)?;
            g.push((up - down) / (2.0 * STEP));
        }
        out.push(g);
    }
    Ok(out)
}

/// Reverse-mode gradients of `f` on a fresh first-order tape.
pub fn analytic_grads(f: ScalarFn, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let watched: Vec<_> = inputs.iter().map(|t| tape.watch(t)).collect();
    let y = f(&watched)?;
    let refs: Vec<_> = watched.iter().collect();
    Ok(tape.grad(&y, &refs, false)?.iter().map(|g| g.to_f64_vec()).collect())
}

/// Largest relative error between analytic and numeric gradients over all
/// inputs.
pub fn gradcheck(f: ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let analytic = analytic_grads(f, inputs)?;
    let numeric = numeric_grads(&|xs| f(xs)?.item(), inputs)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n, 1e-8))
        .fold(0.0, f64::max))
}

/// Checks the gradient of `h = Σ r ⊙ (∂f/∂inputs[wrt])²`: analytic through
/// a recorded reverse sweep, numeric by differencing first-order gradients.
/// Returns the largest relative error.
pub fn second_order_check(f: ScalarFn, inputs: &[Tensor<f64>], wrt: usize, weights: &Tensor<f64>) -> Result<f64> {
    let tape = Tape::higher_order();
    let watched: Vec<_> = inputs.iter().map(|t| tape.watch(t)).collect();
    let y = f(&watched)?;
    let g = tape.grad(&y, &[&watched[wrt]], true)?.remove(0);
    let h = g.square()?.mul(weights)?.sum()?;
    let refs: Vec<_> = watched.iter().collect();
    let analytic: Vec<Vec<f64>> = tape.grad(&h, &refs, false)?.iter().map(|g| g.to_f64_vec()).collect();
    let numeric = numeric_grads(
        &|xs| {
            let first = analytic_grads(f, xs)?.swap_remove(wrt);
            Ok(first.iter().zip(weights.data()).map(|(g, r)| g * g * r).sum())
        },
        inputs,
    )?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n, 1e-6))
        .fold(0.0, f64::max))
}
