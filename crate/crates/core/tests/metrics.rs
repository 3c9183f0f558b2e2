mod common;

use common::{random_mask, random_volume, rng};
use pavae::metrics::{asd, dice, hd95, jaccard, nmse, psnr, ssim3d, surface_distances, MetricsReport, PSNR_CAP_DB};
use pavae::volume::{MaskVolume, Volume};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn fast_paths_match_oracles() {
    for (name, err) in common::oracle_report() {
        let tol = if name.starts_with("surface") || name.starts_with("ASD") { 0.0 } else { 1e-10 };
        assert!(err <= tol, "{name}: {err:e}");
    }
}

#[test]
fn constant_volumes_ssim_by_hand() {
    // No variance anywhere: SSIM is the luminance term alone.
    let (a, b) = (0.2, 0.7);
    let c1 = 1e-4;
    let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let got = ssim3d(&Volume::filled([8; 3], a as f32), &Volume::filled([8; 3], b as f32)).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!(ssim3d(&Volume::filled([6, 8, 8], 0.1), &Volume::filled([6, 8, 8], 0.1)).is_err());
}

fn perturbed(base: &Volume, scale: f32, noise: &[f32]) -> Volume {
    Volume::new(base.dims(), base.data().iter().zip(noise).map(|(v, e)| v + scale * e).collect()).unwrap()
}

#[test]
fn psnr_gains_three_db_when_mse_halves() {
    let mut r = rng(1);
    for _ in 0..10 {
        let x = random_volume(&mut r, [8; 3]);
        let e: Vec<f32> = (0..512).map(|_| r.gen_range(-0.1..0.1)).collect();
        let a = psnr(&x, &perturbed(&x, 1.0, &e), 1.0).unwrap();
        let b = psnr(&x, &perturbed(&x, std::f32::consts::FRAC_1_SQRT_2, &e), 1.0).unwrap();
        assert!((b - a - 10.0 * 2f64.log10()).abs() < 1e-4, "{}", b - a);
    }
    let x = random_volume(&mut r, [4; 3]);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
}

#[test]
fn psnr_falls_as_error_grows() {
    let mut r = rng(2);
    let x = random_volume(&mut r, [8; 3]);
    let e: Vec<f32> = (0..512).map(|_| r.gen_range(-1.0..1.0)).collect();
    let values: Vec<f64> = (1..=10).map(|k| psnr(&x, &perturbed(&x, 0.01 * k as f32, &e), 1.0).unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn nmse_examples() {
    let x = random_volume(&mut rng(3), [5; 3]);
    assert_eq!(nmse(&x, &x).unwrap(), 0.0);
    assert!((nmse(&x, &Volume::filled([5; 3], 0.0)).unwrap() - 100.0).abs() < 1e-9);
    let scaled = Volume::new([5; 3], x.data().iter().map(|v| v * 1.1).collect()).unwrap();
    assert!((nmse(&x, &scaled).unwrap() - 1.0).abs() < 1e-4);
}

#[test]
fn segmentation_report_and_empty_masks() {
    let mut a = MaskVolume::empty([8; 3]);
    a.set(1, 1, 1, true);
    let mut b = MaskVolume::empty([8; 3]);
    b.set(1, 1, 4, true);
    let r = MetricsReport::segmentation(&a, &b).unwrap();
    assert_eq!((r.asd_vox, r.hd95_vox, r.dice, r.jaccard), (Some(3.0), Some(3.0), Some(0.0), Some(0.0)));
    assert!(r.psnr_db.is_none());
    let empty = MaskVolume::empty([8; 3]);
    assert!(matches!(asd(&a, &empty), Err(pavae::Error::UndefinedDistance(_))));
    let lenient = MetricsReport::segmentation_lenient(&a, &empty).unwrap();
    assert_eq!(lenient.dice, Some(0.0));
    assert!((lenient.hd95_vox.unwrap() - (192f64).sqrt()).abs() < 1e-12);
}

fn mask_pair() -> impl Strategy<Value = (MaskVolume, MaskVolume)> {
    (any::<u64>(), 0.05f64..0.7, 0.05f64..0.7).prop_map(|(seed, pa, pb)| {
        let mut r = rng(seed);
        let mut a = random_mask(&mut r, [6, 7, 5], pa);
        let mut b = random_mask(&mut r, [6, 7, 5], pb);
        a.set(0, 0, 0, true);
        b.set(5, 6, 4, true);
        (a, b)
    })
}

fn hausdorff(a: &MaskVolume, b: &MaskVolume) -> f64 {
    *surface_distances(a, b).unwrap().last().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_and_distance_properties((a, b) in mask_pair()) {
        let (d, j) = (dice(&a, &b).unwrap(), jaccard(&a, &b).unwrap());
        prop_assert!(j <= d + 1e-15);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(asd(&a, &b).unwrap(), asd(&b, &a).unwrap());
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
        prop_assert!(hd95(&a, &b).unwrap() <= hausdorff(&a, &b));
        prop_assert_eq!(asd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ssim_bounds_and_symmetry(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_volume(&mut r, [8, 7, 9]);
        let y = random_volume(&mut r, [8, 7, 9]);
        let s = ssim3d(&x, &y).unwrap();
        prop_assert!(s.abs() <= 1.0);
        prop_assert_eq!(s, ssim3d(&y, &x).unwrap());
        prop_assert!((ssim3d(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }
}
