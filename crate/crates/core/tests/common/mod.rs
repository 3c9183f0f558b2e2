#![allow(dead_code)]

use pavae::autograd::check::rel_err;
use pavae::autograd::{Tape, Tensor};
use pavae::metrics::{nearest_rank, ssim_taps, SSIM_WINDOW};
use pavae::models::NetConfig;
use pavae::nn::Module;
use pavae::volume::{Dims, MaskVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// 8³ toy networks small enough for exhaustive finite differences.
pub fn toy_config() -> NetConfig {
    NetConfig {
        side: 8,
        levels: 2,
        base_channels: 2,
        latent_dim: 4,
        cond_hidden: 3,
        meb_hidden: 2,
    }
}

/// Overwrites every parameter with small random values, so zero-initialized
/// heads are exercised too.
pub fn randomize<M: Module<f64>>(net: &mut M, seed: u64) {
    let mut r = rng(seed);
    for p in net.params_mut() {
        let shape = p.shape().to_vec();
        p.set_value(uniform(&mut r, &shape, -0.5, 0.5)).unwrap();
    }
}

/// Contracts a tensor against fixed random weights into a scalar.
pub fn contract(y: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let w = uniform(&mut rng(seed ^ 0x5eed), y.shape(), -1.0, 1.0);
    y.mul(&w).unwrap().sum().unwrap()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `loss` with respect to every parameter of `net`. `tape`
/// builds the tape the analytic pass runs on.
pub fn model_gradcheck<M: Module<f64>>(
    net: &mut M,
    tape: impl Fn() -> Tape<f64>,
    loss: &dyn Fn(&M, &Tape<f64>) -> Tensor<f64>,
) -> f64 {
    let t = tape();
    net.attach(&t);
    let l = loss(net, &t);
    let floor = 1e-6 * l.item().unwrap().abs().max(1.0);
    let grads = t.backward(&l, false).unwrap();
    let analytic: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| grads.get(p.value()).map_or(vec![0.0; p.value().numel()], |g| g.to_f64_vec()))
        .collect();
    net.detach();

    let count = net.params().len();
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate().take(count) {
        let base = net.params()[k].value().to_vec();
        let shape = net.params()[k].shape().to_vec();
        let mut numeric = Vec::with_capacity(base.len());
        for j in 0..base.len() {
            let mut eval = |delta: f64| {
                let mut v = base.clone();
                v[j] += delta;
                net.params_mut()[k].set_value(Tensor::from_vec(shape.clone(), v).unwrap()).unwrap();
                loss(net, &tape()).item().unwrap()
            };
            numeric.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
        }
        net.params_mut()[k].set_value(Tensor::from_vec(shape, base).unwrap()).unwrap();
        // Biases feeding a normalization have exactly zero gradient; the
        // floor keeps difference noise (about 1e-11·|L|) from reading as an
        // error.
        let e = rel_err(a, &numeric, floor);
        worst = worst.max(e);
    }
    worst
}

pub fn random_mask(r: &mut ChaCha8Rng, dims: Dims, p: f64) -> MaskVolume {
    let n = dims.iter().product();
    MaskVolume::new(dims, (0..n).map(|_| u8::from(r.gen_bool(p))).collect()).unwrap()
}

pub fn random_volume(r: &mut ChaCha8Rng, dims: Dims) -> Volume {
    let n = dims.iter().product();
    Volume::new(dims, (0..n).map(|_| r.gen::<f32>()).collect()).unwrap()
}

/// Boundary voxels by scanning all six neighbours of every voxel.
pub fn surface_brute(m: &MaskVolume) -> Vec<[usize; 3]> {
    let [d, h, w] = m.dims();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !m.get(z, y, x) {
                    continue;
                }
                let offsets = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                let border = offsets.iter().any(|&(dz, dy, dx)| {
                    let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    nz < 0
                        || ny < 0
                        || nx < 0
                        || nz >= d as isize
                        || ny >= h as isize
                        || nx >= w as isize
                        || !m.get(nz as usize, ny as usize, nx as usize)
                });
                if border {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Sorted symmetric surface distances by all-pairs search.
pub fn distances_brute(a: &MaskVolume, b: &MaskVolume) -> Vec<f64> {
    let (sa, sb) = (surface_brute(a), surface_brute(b));
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3).map(|i| (p[i] as f64 - q[i] as f64).powi(2)).sum::<f64>().sqrt()
    };
    let nearest = |p: &[usize; 3], s: &[[usize; 3]]| s.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let mut out: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).chain(sb.iter().map(|q| nearest(q, &sa))).collect();
    out.sort_by(f64::total_cmp);
    out
}

pub fn asd_hd95_brute(a: &MaskVolume, b: &MaskVolume) -> (f64, f64) {
    let d = distances_brute(a, b);
    (d.iter().sum::<f64>() / d.len() as f64, nearest_rank(&d, 95.0))
}

/// SSIM straight from its definition: full 3D Gaussian weights at every
/// window position, no separable filtering.
pub fn ssim_direct(x: &Volume, y: &Volume) -> f64 {
    let g = ssim_taps();
    let [d, h, w] = x.dims();
    let k = SSIM_WINDOW;
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=d - k {
        for yy in 0..=h - k {
            for xx in 0..=w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        for c in 0..k {
                            let wt = g[a] * g[b] * g[c];
                            let p = x.get(z + a, yy + b, xx + c) as f64;
                            let q = y.get(z + a, yy + b, xx + c) as f64;
                            mx += wt * p;
                            my += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Direct nested-loop 3D cross-correlation.
pub fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let (n, ci, d, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    let co = w.shape()[0];
    let k = 3;
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xv, wv) = (x.data(), w.data());
    let mut out = vec![0.0; n * co * od * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for a in 0..k {
                                for bb in 0..k {
                                    for e in 0..k {
                                        let iz = (z * stride + a) as isize - pad as isize;
                                        let iy = (y * stride + bb) as isize - pad as isize;
                                        let ix = (xx * stride + e) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((b * ci + c) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((o * ci + c) * k + a) * k + bb) * k + e;
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

/// Instance normalization from its definition, one slice at a time.
pub fn instance_norm_direct(x: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let s = x.shape();
    let per = s[2] * s[3] * s[4];
    x.data()
        .chunks_exact(per)
        .flat_map(|c| {
            let mean = c.iter().sum::<f64>() / per as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            c.iter().map(move |v| (v - mean) / (var + eps).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

/// Worst relative gradient error of `f` with respect to plain tensor inputs.
pub fn input_gradcheck(f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>, inputs: &[Tensor<f64>]) -> f64 {
    pavae::autograd::check::gradcheck(&|x| Ok(f(x)), inputs).unwrap()
}

/// A toy batch: two random masks with their phantom-like lesions.
pub fn toy_batch(seed: u64, side: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    use pavae::conditioning::{condition_batch, encode_condition};
    use pavae::volume::stack_masks;
    let mut r = rng(seed);
    let masks: Vec<MaskVolume> = (0..2)
        .map(|_| loop {
            let m = random_mask(&mut r, [side; 3], 0.3);
            if !m.is_empty() {
                break m;
            }
        })
        .collect();
    let refs: Vec<&MaskVolume> = masks.iter().collect();
    let m = stack_masks::<f64>(&refs).unwrap();
    let lesions = m.mul_scalar(0.5).unwrap().add(&uniform(&mut r, m.shape(), 0.2, 0.4)).unwrap();
    let conds = condition_batch(&masks.iter().map(|m| encode_condition(m).unwrap()).collect::<Vec<_>>()).unwrap();
    (m, lesions, conds)
}

/// Full generator objective with fixed noise: `L_rec + L_kl + 0.01·L_G`.
pub fn generator_objective<N: pavae::models::VaeGan<f64>>(
    net: &N,
    x: &Tensor<f64>,
    guide: &Tensor<f64>,
    eps: &Tensor<f64>,
) -> Tensor<f64> {
    use pavae::losses::{gen_adv_loss, kl_gaussian, recon_mse, Aggregation};
    let (mu, logvar) = net.encode(x).unwrap();
    let z = pavae::models::reparameterize(&mu, &logvar, eps).unwrap();
    let x_g = net.decode(&z, guide).unwrap();
    let l = recon_mse(&x_g, x, Aggregation::Mean).unwrap();
    let l = l.add(&kl_gaussian(&mu, &logvar, Aggregation::Mean).unwrap()).unwrap();
    let adv = gen_adv_loss(net.critic(), &x_g).unwrap().mul_scalar(0.01).unwrap();
    l.add(&adv).unwrap().add(&contract(&x_g, 77).mul_scalar(0.1).unwrap()).unwrap()
}

/// Finite-difference checks over every parameter of the 8³ toy models:
/// both generators under their full objective and both critics under the
/// gradient-penalized critic loss (the second-order path).
pub fn toy_model_checks() -> Vec<(&'static str, f64)> {
    use pavae::losses::{critic_loss, GpConfig};
    use pavae::models::{LesionSynthNet, MaskSynthNet, VaeGan};
    let cfg = toy_config();
    let (masks, lesions, conds) = toy_batch(31, cfg.side);
    let eps = uniform(&mut rng(32), &[2, cfg.latent_dim], -1.0, 1.0);
    let gp = GpConfig::default();

    let mut mask_net = MaskSynthNet::<f64>::new(&cfg, &mut rng(33)).unwrap();
    randomize(&mut mask_net, 34);
    let mut lesion_net = LesionSynthNet::<f64>::new(&cfg, &mut rng(35)).unwrap();
    // Seeds are fixed so no leaky-ReLU input sits within a difference step
    // of its kink, where central differences are meaningless.
    randomize(&mut lesion_net, 41);
    let fake = uniform(&mut rng(37), masks.shape(), 0.0, 1.0);

    let mut out = vec![
        (
            "mask generator",
            model_gradcheck(&mut mask_net, Tape::new, &|n, _| generator_objective(n, &masks, &conds, &eps)),
        ),
        (
            "lesion generator",
            model_gradcheck(&mut lesion_net, Tape::new, &|n, _| generator_objective(n, &lesions, &masks, &eps)),
        ),
    ];
    let mut critic = mask_net.critic().clone();
    out.push((
        "critic with gradient penalty",
        model_gradcheck(&mut critic, Tape::higher_order, &|c, t| {
            critic_loss(c, t, &masks, &fake, &gp, &mut rng(38)).unwrap().total
        }),
    ));
    let mut critic = lesion_net.critic().clone();
    out.push((
        "lesion critic with gradient penalty",
        model_gradcheck(&mut critic, Tape::higher_order, &|c, t| {
            critic_loss(c, t, &lesions, &fake, &gp, &mut rng(39)).unwrap().total
        }),
    ));
    out
}

/// Worst deviations of the fast implementations from their oracles:
/// 50 random convolutions, random instance norms, 20 random 8³ mask pairs
/// for surfaces and distances, and random plus constant SSIM cases.
pub fn oracle_report() -> Vec<(&'static str, f64)> {
    use pavae::metrics::{asd, hd95, ssim3d, surface};
    use pavae::nn::instance_norm3d;
    let mut r = rng(2024);

    let mut conv = 0.0f64;
    for _ in 0..50 {
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        let dims: Vec<usize> = (0..3).map(|_| r.gen_range(3..=6)).collect();
        let (n, ci, co) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let x = uniform(&mut r, &[n, ci, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let w = uniform(&mut r, &[co, ci, 3, 3, 3], -1.0, 1.0);
        let y = x.conv3d(&w, stride, pad).unwrap();
        let (shape, want) = conv3d_oracle(&x, &w, stride, pad);
        assert_eq!(y.shape(), shape.as_slice());
        conv = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(conv, f64::max);
    }

    let mut norm = 0.0f64;
    for _ in 0..20 {
        let x = uniform(&mut r, &[2, 3, 4, 5, 3], -2.0, 2.0);
        let y = instance_norm3d(&x, 1e-5).unwrap();
        let want = instance_norm_direct(&x, 1e-5);
        norm = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(norm, f64::max);
    }

    let (mut surf, mut dist) = (0.0f64, 0.0f64);
    let mut pairs = 0;
    while pairs < 20 {
        let (pa, pb) = (r.gen_range(0.05..0.6), r.gen_range(0.05..0.6));
        let (a, b) = (random_mask(&mut r, [8; 3], pa), random_mask(&mut r, [8; 3], pb));
        if a.is_empty() || b.is_empty() {
            continue;
        }
        pairs += 1;
        for m in [&a, &b] {
            if surface(m).points != surface_brute(m) {
                surf = 1.0;
            }
        }
        let (want_asd, want_hd) = asd_hd95_brute(&a, &b);
        dist = dist.max((asd(&a, &b).unwrap() - want_asd).abs());
        dist = dist.max((hd95(&a, &b).unwrap() - want_hd).abs());
    }

    let mut ssim = 0.0f64;
    for k in 0..6 {
        let dims = [r.gen_range(7..=10), r.gen_range(7..=10), r.gen_range(7..=10)];
        let (x, y) = if k == 0 {
            (Volume::filled(dims, 0.2), Volume::filled(dims, 0.7))
        } else {
            (random_volume(&mut r, dims), random_volume(&mut r, dims))
        };
        ssim = ssim.max((ssim3d(&x, &y).unwrap() - ssim_direct(&x, &y)).abs());
    }

    vec![
        ("conv3d vs nested loops", conv),
        ("instance norm vs direct formula", norm),
        ("surface vs neighbour scan", surf),
        ("ASD/HD95 vs all-pairs search", dist),
        ("SSIM vs direct window", ssim),
    ]
}

/// Finite-difference sweep over every differentiable tensor operation, the
/// layer functions built on them, and second-order sweeps through the ops
/// the gradient penalty differentiates twice. Returns the worst relative
/// error per family.
pub fn op_sweep() -> Vec<(&'static str, f64)> {
    use pavae::autograd::check::{gradcheck, second_order_check};
    use pavae::losses::{kl_gaussian, recon_mse, Aggregation};
    let fo = |f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>, x: &[Tensor<f64>]| gradcheck(&|t| Ok(f(t)), x).unwrap();
    let so = |f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>, x: &[Tensor<f64>], w: &Tensor<f64>| {
        second_order_check(&|t| Ok(f(t)), x, 0, w).unwrap()
    };
    let c = |y: Tensor<f64>, s: u64| contract(&y, s);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut push = |name: &'static str, e: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => out.push((name, e)),
    };
    for seed in 0..10u64 {
        let mut r = rng(9000 + seed);
        let a = uniform(&mut r, &[2, 3], -2.0, 2.0);
        let b = uniform(&mut r, &[3], 0.5, 2.0);
        let pos = uniform(&mut r, &[2, 3], 0.2, 3.0);
        let away = Tensor::from_vec(vec![2, 3], a.data().iter().map(|&v| if v.abs() < 0.05 { v + 0.2 } else { v }).collect()).unwrap();
        push("add", fo(&|t| c(t[0].add(&t[1]).unwrap(), seed), &[a.clone(), b.clone()]));
        push("sub", fo(&|t| c(t[0].sub(&t[1]).unwrap(), seed), &[a.clone(), b.clone()]));
        push("mul", fo(&|t| c(t[0].mul(&t[1]).unwrap(), seed), &[a.clone(), b.clone()]));
        push("div", fo(&|t| c(t[0].div(&t[1]).unwrap(), seed), &[a.clone(), b.clone()]));
        push("add_scalar", fo(&|t| c(t[0].add_scalar(0.7).unwrap(), seed), &[a.clone()]));
        push("mul_scalar", fo(&|t| c(t[0].mul_scalar(-1.3).unwrap(), seed), &[a.clone()]));
        push("neg", fo(&|t| c(t[0].neg().unwrap(), seed), &[a.clone()]));
        push("square", fo(&|t| c(t[0].square().unwrap(), seed), &[a.clone()]));
        push("exp", fo(&|t| c(t[0].exp().unwrap(), seed), &[a.clone()]));
        push("log", fo(&|t| c(t[0].log().unwrap(), seed), &[pos.clone()]));
        push("sqrt", fo(&|t| c(t[0].sqrt().unwrap(), seed), &[pos.clone()]));
        push("sigmoid", fo(&|t| c(t[0].sigmoid().unwrap(), seed), &[a.clone()]));
        push("softplus", fo(&|t| c(t[0].softplus().unwrap(), seed), &[a.clone()]));
        push("leaky_relu", fo(&|t| c(t[0].leaky_relu(0.2).unwrap(), seed), &[away.clone()]));

        let x3 = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
        push("sum", fo(&|t| t[0].sum().unwrap().square().unwrap(), &[x3.clone()]));
        push("mean", fo(&|t| t[0].mean().unwrap().square().unwrap(), &[x3.clone()]));
        push("sum_axes", fo(&|t| c(t[0].sum_axes(&[0, 2], false).unwrap(), seed), &[x3.clone()]));
        push("mean_axes", fo(&|t| c(t[0].mean_axes(&[1], true).unwrap(), seed), &[x3.clone()]));
        push("reshape", fo(&|t| c(t[0].reshape(&[6, 4]).unwrap(), seed), &[x3.clone()]));
        push("sum_to", fo(&|t| c(t[0].sum_to(&[3, 1]).unwrap(), seed), &[x3.clone()]));
        let small = uniform(&mut r, &[3, 1], -1.0, 1.0);
        push("broadcast_to", fo(&|t| c(t[0].broadcast_to(&[2, 3, 4]).unwrap(), seed), &[small]));
        let m = uniform(&mut r, &[3, 4], -1.0, 1.0);
        let n = uniform(&mut r, &[4, 2], -1.0, 1.0);
        push("matmul", fo(&|t| c(t[0].matmul(&t[1]).unwrap(), seed), &[m.clone(), n]));
        push("transpose", fo(&|t| c(t[0].transpose().unwrap(), seed), &[m]));

        let stride = 1 + seed as usize % 2;
        let pad = (seed % 3 != 0) as usize;
        let x = uniform(&mut r, &[2, 2, 4, 5, 4], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 2, 3, 3, 3], -0.5, 0.5);
        push("conv3d", fo(&|t| c(t[0].conv3d(&t[1], stride, pad).unwrap(), seed), &[x.clone(), w.clone()]));
        let gy = uniform(&mut r, x.conv3d(&w, stride, pad).unwrap().shape(), -1.0, 1.0);
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        push(
            "conv3d_input_grad",
            fo(&|t| c(t[0].conv3d_input_grad(&t[1], &xs, stride, pad).unwrap(), seed), &[gy.clone(), w]),
        );
        push(
            "conv3d_weight_grad",
            fo(&|t| c(t[0].conv3d_weight_grad(&t[1], &ws, stride, pad).unwrap(), seed), &[x, gy]),
        );
        let v = uniform(&mut r, &[1, 2, 2, 3, 2], -1.0, 1.0);
        push("upsample3d", fo(&|t| c(t[0].upsample3d(2).unwrap(), seed), &[v]));
        let v = uniform(&mut r, &[1, 2, 4, 2, 4], -1.0, 1.0);
        push("block_sum3d", fo(&|t| c(t[0].block_sum3d(2).unwrap(), seed), &[v]));

        let v = uniform(&mut r, &[2, 2, 3, 3, 3], -1.0, 1.0);
        push("instance_norm3d", fo(&|t| c(pavae::nn::instance_norm3d(&t[0], 1e-5).unwrap(), seed), &[v]));
        let (mu, lv) = (uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0));
        let eps = uniform(&mut r, &[3, 4], -1.0, 1.0);
        push(
            "reparameterize",
            fo(&|t| c(pavae::models::reparameterize(&t[0], &t[1], &eps).unwrap(), seed), &[mu.clone(), lv.clone()]),
        );
        push("kl_gaussian", fo(&|t| kl_gaussian(&t[0], &t[1], Aggregation::Mean).unwrap(), &[mu, lv]));
        let (p, q) = (uniform(&mut r, &[2, 5], 0.0, 1.0), uniform(&mut r, &[2, 5], 0.0, 1.0));
        push("recon_mse", fo(&|t| recon_mse(&t[0], &t[1], Aggregation::Mean).unwrap(), &[p, q]));

        // Second order: d/da of <weights, d f / d a>.
        let wts = uniform(&mut r, &[2, 3], 0.0, 1.0);
        let weigh = |y: Tensor<f64>| c(y, seed + 50);
        push("2nd elementwise", so(&|t| weigh(t[0].mul(&t[1]).unwrap().sigmoid().unwrap()), &[a.clone(), b.clone()], &wts));
        push("2nd elementwise", so(&|t| weigh(t[0].div(&t[1]).unwrap().exp().unwrap()), &[a.clone(), b.clone()], &wts));
        push("2nd elementwise", so(&|t| weigh(t[0].log().unwrap().mul(&t[0]).unwrap()), &[pos.clone()], &wts));
        push("2nd elementwise", so(&|t| weigh(t[0].sqrt().unwrap().softplus().unwrap()), &[pos.clone()], &wts));
        push("2nd elementwise", so(&|t| weigh(t[0].leaky_relu(0.2).unwrap().square().unwrap()), &[away], &wts));
        let x = uniform(&mut r, &[2, 1, 4, 4, 4], 0.0, 1.0);
        let w1 = uniform(&mut r, &[2, 1, 3, 3, 3], -0.5, 0.5);
        let w2 = uniform(&mut r, &[16, 1], -0.5, 0.5);
        let wx = uniform(&mut r, &[2, 1, 4, 4, 4], 0.0, 1.0);
        push(
            "2nd conv critic",
            so(
                &|t| {
                    let h = pavae::nn::instance_norm3d(&t[0].conv3d(&t[1], 2, 1).unwrap(), 1e-5).unwrap();
                    let h = h.sigmoid().unwrap().upsample3d(2).unwrap().block_sum3d(2).unwrap();
                    h.reshape(&[2, 16]).unwrap().matmul(&t[2]).unwrap().sum().unwrap()
                },
                &[x, w1, w2],
                &wx,
            ),
        );
    }
    out
}

/// `D(x) = Σ w·x` per sample.
pub struct LinearCritic {
    pub w: Tensor<f64>,
}

impl LinearCritic {
    pub fn with_norm(norm: f64, shape: &[usize], seed: u64) -> Self {
        let w = uniform(&mut rng(seed), shape, -1.0, 1.0);
        let n = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            w: w.mul_scalar(norm / n).unwrap(),
        }
    }
}

impl pavae::losses::Critic<f64> for LinearCritic {
    fn score(&self, x: &Tensor<f64>) -> pavae::Result<Tensor<f64>> {
        let axes: Vec<usize> = (1..x.rank()).collect();
        Ok(x.mul(&self.w)?.sum_axes(&axes, false)?)
    }
}

/// `E_q[log q(z) − log p(z)]` for a diagonal Gaussian `q` against `N(0, I)`,
/// estimated from `n` draws per dimension.
pub fn kl_monte_carlo(mu: &[f64], logvar: &[f64], n: usize, seed: u64) -> f64 {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let s = (0.5 * lv).exp();
            let q = Normal::new(m, s).unwrap();
            let acc: f64 = (0..n)
                .map(|_| {
                    let z: f64 = q.sample(&mut r);
                    -0.5 * ((z - m) / s).powi(2) - s.ln() + 0.5 * z * z
                })
                .sum();
            acc / n as f64
        })
        .sum()
}
