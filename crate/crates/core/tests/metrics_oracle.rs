//! Metric implementations checked against straightforward double-precision
//! references that share no code with the library.

mod common;

use common::{metric_fixture, ref_mse, ref_ssim};
use hiresedit::metrics::{mse, psnr, seam_score, ssim};
use hiresedit::{RegionMask, SplitMix64, Tensor};

#[test]
fn metrics_agree_with_reference_on_random_fixtures() {
    for seed in 0..20u64 {
        let (a, b, active) = metric_fixture(seed);
        let mask = RegionMask::new(64, 64, active.clone()).unwrap();
        let full = vec![true; 64 * 64];

        let m = mse(&a, &b, Some(&mask)).unwrap();
        assert!((m - ref_mse(&a, &b, &active)).abs() <= 1e-6, "seed {seed}");
        let m_full = mse(&a, &b, None).unwrap();
        assert!((m_full - ref_mse(&a, &b, &full)).abs() <= 1e-6);

        let p = psnr(&a, &b, Some(&mask)).unwrap();
        assert!((p - 10.0 * (1.0 / ref_mse(&a, &b, &active)).log10()).abs() <= 1e-6);

        let s = ssim(&a, &b, Some(&mask)).unwrap();
        let s_ref = ref_ssim(&a, &b, &active);
        assert!((s - s_ref).abs() <= 1e-6, "seed {seed}: {s} vs {s_ref}");
        let s_full = ssim(&a, &b, None).unwrap();
        assert!((s_full - ref_ssim(&a, &b, &full)).abs() <= 1e-6, "seed {seed}");

        // an all-active mask is the unmasked computation, bit for bit
        let everything = RegionMask::full(64, 64);
        assert_eq!(mse(&a, &b, Some(&everything)).unwrap().to_bits(), m_full.to_bits());
        assert_eq!(ssim(&a, &b, Some(&everything)).unwrap().to_bits(), s_full.to_bits());
        assert_eq!(
            psnr(&a, &b, Some(&everything)).unwrap().to_bits(),
            psnr(&a, &b, None).unwrap().to_bits()
        );
    }
}

#[test]
fn half_mask_hand_values() {
    let a = Tensor::zeros([1, 4, 4]);
    let b = Tensor::from_fn([1, 4, 4], |_, y, _| if y < 2 { 0.1 } else { 0.0 });
    let top = RegionMask::new(4, 4, (0..16).map(|p| p < 8).collect()).unwrap();
    assert!((mse(&a, &b, Some(&top)).unwrap() - 0.01).abs() < 1e-9);
    assert!((psnr(&a, &b, Some(&top)).unwrap() - 20.0).abs() < 1e-6);
    assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
}

#[test]
fn seam_score_reference_cases() {
    // a linear ramp has identical steps everywhere
    let ramp = Tensor::from_fn([1, 32, 32], |_, y, x| (y + x) as f32 / 64.0);
    let r = seam_score(&ramp, 2, 2).unwrap().unwrap();
    assert!((r - 1.0).abs() <= 0.05, "{r}");

    // a 0/1 step on the boundary over a 0.01 noise floor
    let mut rng = SplitMix64::new(2);
    let step = Tensor::from_fn([1, 32, 16], |_, y, _| {
        (if y < 16 { 0.0 } else { 1.0 }) + rng.uniform(0.0, 0.01)
    });
    assert!(seam_score(&step, 2, 1).unwrap().unwrap() > 5.0);

    assert_eq!(seam_score(&step, 1, 1).unwrap(), None);
}
