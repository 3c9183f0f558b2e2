//! Finite-difference checks of every differentiable operation.

mod common;

use common::{assert_gradcheck, rng, uniform};
use pavae_autograd::Tensor;
use rand::Rng;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 50;

/// Contracts an arbitrary-shaped output against fixed random weights so the
/// upstream gradient is not uniform.
fn contract(y: Tensor<f64>, seed: u64) -> Tensor<f64> {
    let w = uniform(&mut rng(seed ^ 0xabcdef), y.shape(), -1.0, 1.0);
    y.mul(&w).unwrap().sum().unwrap()
}

#[test]
fn binary_ops_with_broadcasting() {
    let shapes: [(&[usize], &[usize]); 4] = [(&[2, 3], &[2, 3]), (&[2, 3], &[3]), (&[2, 1, 4], &[3, 1]), (&[3], &[])];
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (sa, sb) = shapes[seed as usize % shapes.len()];
        let a = uniform(&mut r, sa, -2.0, 2.0);
        // keep the divisor away from zero
        let b = uniform(&mut r, sb, 0.5, 2.0).mul_scalar(if r.gen_bool(0.5) { 1.0 } else { -1.0 }).unwrap();
        assert_gradcheck(&|x| contract(x[0].add(&x[1]).unwrap(), seed), &[a.clone(), b.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].sub(&x[1]).unwrap(), seed), &[a.clone(), b.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].mul(&x[1]).unwrap(), seed), &[a.clone(), b.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].div(&x[1]).unwrap(), seed), &[a, b], TOL);
    }
}

#[test]
fn div_gradient_is_tight() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed + 1000);
        let a = uniform(&mut r, &[4], -3.0, 3.0);
        let b = uniform(&mut r, &[4], 0.5, 3.0);
        let worst = assert_gradcheck(&|x| contract(x[0].div(&x[1]).unwrap(), seed), &[a, b], 1e-6);
        assert!(worst < 1e-6);
    }
}

#[test]
fn unary_ops() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed + 2000);
        let any = uniform(&mut r, &[2, 5], -2.0, 2.0);
        let pos = uniform(&mut r, &[2, 5], 0.2, 3.0);
        // leaky-ReLU is not differentiable at 0; sample away from the kink
        let away: Tensor<f64> = Tensor::from_vec(
            [2, 5],
            any.data().iter().map(|&v| if v.abs() < 0.05 { v + 0.2 } else { v }).collect(),
        )
        .unwrap();
        assert_gradcheck(&|x| contract(x[0].exp().unwrap(), seed), &[any.clone()], 1e-6);
        assert_gradcheck(&|x| contract(x[0].neg().unwrap(), seed), &[any.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].square().unwrap(), seed), &[any.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].sigmoid().unwrap(), seed), &[any.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].softplus().unwrap(), seed), &[any.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].leaky_relu(0.2).unwrap(), seed), &[away], TOL);
        assert_gradcheck(&|x| contract(x[0].log().unwrap(), seed), &[pos.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].sqrt().unwrap(), seed), &[pos], TOL);
    }
}

#[test]
fn reductions_and_shape_ops() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed + 3000);
        let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
        assert_gradcheck(&|x| x[0].sum().unwrap().mul(&x[0].mean().unwrap()).unwrap(), &[a.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].sum_axes(&[0, 2], false).unwrap(), seed), &[a.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].mean_axes(&[1], true).unwrap(), seed), &[a.clone()], TOL);
        assert_gradcheck(&|x| contract(x[0].reshape(&[6, 4]).unwrap(), seed), &[a.clone()], TOL);
        let small = uniform(&mut r, &[3, 1], -1.0, 1.0);
        assert_gradcheck(&|x| contract(x[0].broadcast_to(&[2, 3, 4]).unwrap(), seed), &[small], TOL);
        assert_gradcheck(&|x| contract(x[0].sum_to(&[3, 1]).unwrap(), seed), &[a], TOL);
    }
}

#[test]
fn mean_gradient_is_uniform() {
    let x = Tensor::<f64>::from_f64([5], &[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
    let g = common::analytic_grads(&|x| x[0].mean().unwrap(), &[x]);
    assert!(g[0].iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn matmul_and_transpose() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed + 4000);
        let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
        let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
        assert_gradcheck(&|x| contract(x[0].matmul(&x[1]).unwrap(), seed), &[a.clone(), b], TOL);
        assert_gradcheck(&|x| contract(x[0].transpose().unwrap(), seed), &[a], TOL);
    }
}

#[test]
fn convolution_family() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed + 5000);
        let stride = 1 + (seed as usize % 2);
        let pad = if seed % 3 == 0 { 0 } else { 1 };
        let side = 4 + (seed as usize % 2);
        let x = uniform(&mut r, &[2, 2, side, side, side - 1], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 2, 3, 3, 3], -0.5, 0.5);
        assert_gradcheck(&|t| contract(t[0].conv3d(&t[1], stride, pad).unwrap(), seed), &[x.clone(), w.clone()], TOL);

        let out_shape = x.conv3d(&w, stride, pad).unwrap().shape().to_vec();
        let gy = uniform(&mut r, &out_shape, -1.0, 1.0);
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_gradcheck(
            &|t| contract(t[0].conv3d_input_grad(&t[1], &xs, stride, pad).unwrap(), seed),
            &[gy.clone(), w],
            TOL,
        );
        assert_gradcheck(
            &|t| contract(t[0].conv3d_weight_grad(&t[1], &ws, stride, pad).unwrap(), seed),
            &[x, gy],
            TOL,
        );
    }
}

#[test]
fn resampling() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed + 6000);
        let x = uniform(&mut r, &[1, 2, 2, 2, 3], -1.0, 1.0);
        let f = 1 + seed as usize % 3;
        assert_gradcheck(&|t| contract(t[0].upsample3d(f).unwrap(), seed), &[x], TOL);
        let y = uniform(&mut r, &[1, 2, 4, 4, 2], -1.0, 1.0);
        assert_gradcheck(&|t| contract(t[0].block_sum3d(2).unwrap(), seed), &[y], TOL);
    }
}

#[test]
fn composite_two_layer_network() {
    for seed in 0..10 {
        let mut r = rng(seed + 7000);
        let x = uniform(&mut r, &[2, 1, 4, 4, 4], 0.0, 1.0);
        let w1 = uniform(&mut r, &[2, 1, 3, 3, 3], -0.5, 0.5);
        let w2 = uniform(&mut r, &[16, 3], -0.5, 0.5);
        let f = |t: &[Tensor<f64>]| {
            let h = t[0].conv3d(&t[1], 2, 1).unwrap().leaky_relu(0.2).unwrap(); // [2,2,2,2,2]
            let flat = h.reshape(&[2, 16]).unwrap();
            let y = flat.matmul(&t[2]).unwrap().sigmoid().unwrap();
            y.square().unwrap().mean().unwrap()
        };
        assert_gradcheck(&f, &[x, w1, w2], TOL);
    }
}
