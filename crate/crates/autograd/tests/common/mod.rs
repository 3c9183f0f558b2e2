#![allow(dead_code, unused_imports)]

use pavae_autograd::{check, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use pavae_autograd::check::{analytic_grads as checked_grads, rel_err, STEP};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// First-order analytic gradients via a fresh tape.
pub fn analytic_grads(f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    checked_grads(&|x| Ok(f(x)), inputs).unwrap()
}

/// Asserts analytic and finite-difference gradients agree for every input.
pub fn assert_gradcheck(f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>, inputs: &[Tensor<f64>], tol: f64) -> f64 {
    let worst = check::gradcheck(&|x| Ok(f(x)), inputs).unwrap();
    assert!(worst < tol, "relative error {worst:e} exceeds {tol:e}");
    worst
}

/// Asserts the recorded second-order sweep matches finite differences.
pub fn assert_second_order(
    f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
    inputs: &[Tensor<f64>],
    wrt: usize,
    weights: &Tensor<f64>,
    tol: f64,
) -> f64 {
    let worst = check::second_order_check(&|x| Ok(f(x)), inputs, wrt, weights).unwrap();
    assert!(worst < tol, "second-order relative error {worst:e} exceeds {tol:e}");
    worst
}

/// Direct nested-loop 3D cross-correlation.
pub fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, ci, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (co, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let od = (d + 2 * pad - kd) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![0.0; n * co * od * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let iz = (z * stride + a) as isize - pad as isize;
                                        let iy = (y * stride + bb) as isize - pad as isize;
                                        let ix = (xx * stride + e) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((b * ci + c) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((o * ci + c) * kd + a) * kh + bb) * kw + e;
                                        acc += xv[xi] * wv[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * co + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (vec![n, co, od, oh, ow], out)
}
