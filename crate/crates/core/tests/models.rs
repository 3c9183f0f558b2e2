mod common;

use common::{randomize, rng, toy_config, uniform};
use pavae::autograd::{Tape, Tensor};
use pavae::losses::Critic;
use pavae::models::{reparameterize, standard_normal, LesionSynthNet, MaskSynthNet, NetConfig, VaeGan};
use pavae::nn::Module;
use std::collections::BTreeSet;

#[test]
fn toy_models_pass_finite_differences() {
    for (name, worst) in common::toy_model_checks() {
        assert!(worst < 1e-4, "{name}: {worst:e}");
    }
}

#[test]
fn encoder_shapes_and_determinism() {
    let cfg = toy_config();
    let net = MaskSynthNet::<f64>::new(&cfg, &mut rng(1)).unwrap();
    let x = uniform(&mut rng(2), &[3, 1, 8, 8, 8], 0.0, 1.0);
    let (mu, lv) = net.encode(&x).unwrap();
    assert_eq!(mu.shape(), [3, cfg.latent_dim]);
    assert_eq!(lv.shape(), [3, cfg.latent_dim]);
    let (mu2, _) = net.encode(&x).unwrap();
    assert_eq!(mu.data(), mu2.data());
    assert!(net.encode(&uniform(&mut rng(2), &[1, 1, 4, 4, 4], 0.0, 1.0)).is_err());
}

#[test]
fn reparameterization_statistics() {
    let (mu, sd) = (0.7, 1.8f64);
    let n = 100_000;
    let eps: Tensor<f64> = standard_normal(&[n], &mut rng(3));
    let z = reparameterize(&Tensor::full([n], mu), &Tensor::full([n], 2.0 * sd.ln()), &eps).unwrap();
    let mean = z.data().iter().sum::<f64>() / n as f64;
    let std = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!((mean - mu).abs() < 0.02 * mu);
    assert!((std - sd).abs() < 0.02 * sd);
}

fn small(side: usize) -> NetConfig {
    NetConfig {
        side,
        levels: 3,
        base_channels: 2,
        latent_dim: 4,
        cond_hidden: 4,
        meb_hidden: 2,
    }
}

#[test]
fn round_trip_shapes_for_every_desk_side() {
    for side in [16, 32, 64] {
        let cfg = small(side);
        let mut lesion = LesionSynthNet::<f32>::new(&cfg, &mut rng(4)).unwrap();
        let mut r = rng(5);
        let x = Tensor::<f32>::from_vec([1, 1, side, side, side], (0..side.pow(3)).map(|_| rand::Rng::gen(&mut r)).collect())
            .unwrap();
        let mask = Tensor::from_vec(x.shape().to_vec(), x.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect())
            .unwrap();
        let (mu, lv) = lesion.encode(&x).unwrap();
        let z = reparameterize(&mu, &lv, &standard_normal(mu.shape(), &mut r)).unwrap();
        let y = lesion.decode(&z, &mask).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        lesion.conditioning_frozen = true;
        assert_eq!(lesion.decode(&z, &mask).unwrap().shape(), x.shape());
    }
}

#[test]
fn decoder_range_for_arbitrary_weights() {
    let cfg = toy_config();
    let mut net = MaskSynthNet::<f64>::new(&cfg, &mut rng(6)).unwrap();
    for p in net.params_mut() {
        let shape = p.shape().to_vec();
        p.set_value(uniform(&mut rng(7), &shape, -20.0, 20.0)).unwrap();
    }
    let z = uniform(&mut rng(8), &[4, cfg.latent_dim], -5.0, 5.0);
    let c = uniform(&mut rng(9), &[4, 1], 0.0, 1.0);
    let y = net.decode(&z, &c).unwrap();
    assert_eq!(y.shape(), [4, 1, 8, 8, 8]);
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn condition_changes_output_once_heads_are_nonzero() {
    let cfg = toy_config();
    let mut net = MaskSynthNet::<f64>::new(&cfg, &mut rng(10)).unwrap();
    let z = uniform(&mut rng(11), &[1, cfg.latent_dim], -1.0, 1.0);
    let lo = Tensor::from_f64([1, 1], &[0.2]).unwrap();
    let hi = Tensor::from_f64([1, 1], &[0.9]).unwrap();
    let diff = |n: &MaskSynthNet<f64>| {
        let a = n.decode(&z, &lo).unwrap();
        let b = n.decode(&z, &hi).unwrap();
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    assert_eq!(diff(&net), 0.0);
    randomize(&mut net, 12);
    assert!(diff(&net) > 0.0);
}

#[test]
fn mask_changes_lesion_output_and_decoding_is_deterministic() {
    let cfg = toy_config();
    let mut net = LesionSynthNet::<f64>::new(&cfg, &mut rng(13)).unwrap();
    randomize(&mut net, 14);
    let (masks, _, _) = common::toy_batch(15, 8);
    let z = uniform(&mut rng(16), &[2, cfg.latent_dim], -1.0, 1.0);
    let y = net.decode(&z, &masks).unwrap();
    assert_eq!(y.data(), net.decode(&z, &masks).unwrap().data());
    let half = 512;
    let z1 = Tensor::from_vec([2, cfg.latent_dim], [&z.data()[..4], &z.data()[..4]].concat()).unwrap();
    let y1 = net.decode(&z1, &masks).unwrap();
    let max = (0..half).map(|i| (y1.data()[i] - y1.data()[half + i]).abs()).fold(0.0, f64::max);
    assert!(max > 0.0);
}

#[test]
fn critic_contracts() {
    let cfg = toy_config();
    let net = MaskSynthNet::<f64>::new(&cfg, &mut rng(17)).unwrap();
    let x = uniform(&mut rng(18), &[3, 1, 8, 8, 8], 0.0, 1.0);
    assert_eq!(net.critic.score(&x).unwrap().shape(), [3]);

    let mut zero = net.critic.clone();
    for p in zero.params_mut() {
        let shape = p.shape().to_vec();
        p.set_value(Tensor::zeros(shape)).unwrap();
    }
    assert!(zero.score(&x).unwrap().data().iter().all(|&v| v == 0.0));

    let tape = Tape::new();
    let xw = tape.watch(&x);
    let g = tape.grad(&net.critic.score(&xw).unwrap().sum().unwrap(), &[&xw], false).unwrap();
    assert!(g[0].is_finite());
    let analytic = g[0].data()[100];
    let h = 1e-6;
    let at = |d: f64| {
        let mut v = x.to_vec();
        v[100] += d;
        net.critic.score(&Tensor::from_vec(x.shape().to_vec(), v).unwrap()).unwrap().sum().unwrap().item().unwrap()
    };
    let numeric = (at(h) - at(-h)) / (2.0 * h);
    assert!((analytic - numeric).abs() <= 1e-6 * analytic.abs().max(1.0));
}

#[test]
fn stages_share_no_parameters() {
    let cfg = toy_config();
    let m = MaskSynthNet::<f64>::new(&cfg, &mut rng(19)).unwrap();
    let l = LesionSynthNet::<f64>::new(&cfg, &mut rng(19)).unwrap();
    let ids = |ps: Vec<&pavae::nn::Parameter<f64>>| ps.iter().map(|p| p.id().to_string()).collect::<BTreeSet<_>>();
    let (a, b) = (ids(m.params()), ids(l.params()));
    assert_eq!(a.len(), m.params().len(), "duplicate ids");
    assert!(a.is_disjoint(&b));
    assert!(a.iter().all(|id| id.starts_with("mask_net.")));
    assert!(b.iter().all(|id| id.starts_with("lesion_net.")));
}
