mod common;

use common::{contract, model_gradcheck, randomize, rng, uniform};
use pavae::autograd::{Tape, Tensor};
use pavae::nn::Module;
use pavae::segment::{dice_bce_loss, train_segmenter, Segmenter, SegmenterConfig};
use pavae::volume::{MaskVolume, Volume};

/// Loss from its definition, one voxel at a time.
fn dice_bce_direct(logits: &[f64], target: &[f64]) -> f64 {
    let n = logits.len() as f64;
    let bce: f64 = logits
        .iter()
        .zip(target)
        .map(|(&l, &y)| {
            let p = 1.0 / (1.0 + (-l).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    let p: Vec<f64> = logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
    let inter: f64 = p.iter().zip(target).map(|(a, b)| a * b).sum();
    let dice = 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + target.iter().sum::<f64>() + 1.0);
    dice + bce
}

#[test]
fn loss_matches_definition() {
    let mut r = rng(1);
    for _ in 0..10 {
        let l = uniform(&mut r, &[2, 1, 3, 3, 3], -3.0, 3.0);
        let y = Tensor::from_vec(
            vec![2, 1, 3, 3, 3],
            uniform(&mut r, &[54], 0.0, 1.0).data().iter().map(|&v| (v > 0.5) as u8 as f64).collect(),
        )
        .unwrap();
        let got = dice_bce_loss(&l, &y).unwrap().item().unwrap();
        let want = dice_bce_direct(l.data(), y.data());
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let l = uniform(&mut r, &[1, 1, 2, 2, 3], -2.0, 2.0);
    let y = Tensor::from_vec(vec![1, 1, 2, 2, 3], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let worst = common::input_gradcheck(&|t| dice_bce_loss(&t[0], &y).unwrap(), &[l]);
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn network_gradients_match_finite_differences() {
    let mut net = Segmenter::<f64>::new(2, &mut rng(3)).unwrap();
    randomize(&mut net, 4);
    let x = uniform(&mut rng(5), &[1, 1, 4, 4, 4], 0.0, 1.0);
    let worst = model_gradcheck(&mut net, Tape::new, &|n, _| contract(&n.forward(&x).unwrap(), 6));
    assert!(worst < 1e-4, "{worst:e}");
}

#[test]
fn shapes_and_input_contract() {
    let net = Segmenter::<f32>::new(4, &mut rng(7)).unwrap();
    let y = net.forward(&Tensor::zeros([2, 1, 6, 4, 8])).unwrap();
    assert_eq!(y.shape(), &[2, 1, 6, 4, 8]);
    assert!(net.forward(&Tensor::zeros([1, 1, 5, 4, 4])).is_err());
    assert!(net.forward(&Tensor::zeros([1, 2, 4, 4, 4])).is_err());
    let masks = net.predict(&[&Volume::filled([4; 3], 0.3)]).unwrap();
    assert_eq!(masks[0].dims(), [4; 3]);
}

#[test]
fn epochs_set_the_step_count() {
    let cfg = SegmenterConfig { epochs: 3, batch: 4, ..SegmenterConfig::default() };
    assert_eq!(cfg.steps(16), 12);
    assert_eq!(cfg.steps(17), 15);
    assert_eq!(cfg.steps(1), 3);
}

/// A bright cube on a dark background is learnable in a few epochs.
#[test]
fn learns_a_bright_cube_and_is_deterministic() {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut r = rng(8);
    for k in 0..6 {
        let mut mask = MaskVolume::empty([8; 3]);
        let o = 1 + k % 3;
        for d in o..o + 4 {
            for h in 1..5 {
                for w in 2..6 {
                    mask.set(d, h, w, true);
                }
            }
        }
        let noise = uniform(&mut r, &[512], -0.05, 0.05);
        let data = mask
            .data()
            .iter()
            .zip(noise.data())
            .map(|(&m, &e)| (if m == 1 { 0.8 } else { 0.3 }) as f32 + e as f32)
            .collect();
        images.push(Volume::new([8; 3], data).unwrap());
        labels.push(mask);
    }
    let cfg = SegmenterConfig { channels: 4, epochs: 40, batch: 2, lr: 1e-2, seed: 1 };
    let imgs: Vec<&Volume> = images.iter().collect();
    let labs: Vec<&MaskVolume> = labels.iter().collect();
    let (net, log) = train_segmenter(&imgs, &labs, &cfg).unwrap();
    assert_eq!(log.len(), 120);
    assert!(log[log.len() - 1] < 0.5 * log[0], "{} -> {}", log[0], log[log.len() - 1]);
    let pred = net.predict(&imgs).unwrap();
    let dice: f64 = pred
        .iter()
        .zip(&labels)
        .map(|(p, t)| pavae::metrics::dice(t, p).unwrap())
        .sum::<f64>()
        / 6.0;
    assert!(dice > 0.9, "{dice}");

    let (again, log2) = train_segmenter(&imgs, &labs, &cfg).unwrap();
    assert_eq!(log, log2);
    assert_eq!(
        again.params().iter().map(|p| p.value().data().to_vec()).collect::<Vec<_>>(),
        net.params().iter().map(|p| p.value().data().to_vec()).collect::<Vec<_>>()
    );

    assert!(train_segmenter(&imgs, &labs[..2], &cfg).is_err());
    assert!(train_segmenter(&imgs, &labs, &SegmenterConfig { epochs: 0, ..cfg }).is_err());
}
