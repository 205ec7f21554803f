mod common;

use common::random_tuple;
use proptest::prelude::*;
use radaug_core::domain::{Image, ImageDims, ImageSample, Perturbation, Pose, Weather};
use radaug_core::loss::LossParams;
use radaug_core::model::{ArchDescriptor, InputGradient, PoseRegressor};
use radaug_core::perturb::{
    apply_threshold, batch_threshold, make_adversarial, perturb_batch, raw_perturbation, PerturbOptions,
    PerturberConfig, StageEvent, ThresholdValue,
};

fn grad_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), -1.0..1.0f64, -1e-4..1e-4f64], len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pow_zero_is_signed_epsilon(g in grad_strategy(27), eps in 0.0..500.0f64) {
        let dims = ImageDims::new(3, 3, 3);
        let r = raw_perturbation(&InputGradient::new(dims, g.clone()).unwrap(), eps, 0.0).unwrap();
        for (d, gi) in r.delta().iter().zip(&g) {
            let expect = if *gi > 0.0 { eps } else if *gi < 0.0 { -eps } else { 0.0 };
            prop_assert_eq!(*d, expect);
        }
    }

    #[test]
    fn threshold_bounds_every_element(d in prop::collection::vec(-500.0..500.0f64, 27), eta_th in 0.0..60.0f64) {
        let delta = Perturbation::new(ImageDims::new(3, 3, 3), d).unwrap();
        let th = ThresholdValue { eta_th, x_min: 0.0, x_max: 10.0 * eta_th };
        let out = apply_threshold(&delta, &th);
        prop_assert!(out.max_abs() <= eta_th + 1e-12);
    }

    #[test]
    fn clip_keeps_pixels_in_range(
        x in prop::collection::vec(0.0..=255.0f64, 27),
        d in prop::collection::vec(-400.0..400.0f64, 27),
    ) {
        let dims = ImageDims::new(3, 3, 3);
        let s = ImageSample::new(Image::new(dims, x).unwrap(), Pose::IDENTITY, Weather::Overcast, 0);
        let adv = make_adversarial(&s, &Perturbation::new(dims, d).unwrap(), true).unwrap();
        prop_assert!(adv.pixels.in_pixel_range());
    }

    /// Higher powers put relatively more mass on the largest gradients.
    #[test]
    fn higher_pow_concentrates_mass(g in grad_strategy(64), lo in 0.0..2.0f64, step in 0.05..1.5f64) {
        let grad = InputGradient::new(ImageDims::new(4, 4, 4), g).unwrap();
        let entropy = |pow: f64| normalized_entropy(raw_perturbation(&grad, 3.0, pow).unwrap().delta());
        let (a, b) = (entropy(lo + step), entropy(lo));
        prop_assume!(a.is_finite() && b.is_finite());
        prop_assert!(a <= b + 1e-12, "pow {} -> {a}, pow {} -> {b}", lo + step, lo);
    }
}

/// Shannon entropy of |delta| normalised to a distribution, divided by ln N.
fn normalized_entropy(delta: &[f64]) -> f64 {
    let total: f64 = delta.iter().map(|d| d.abs()).sum();
    if total == 0.0 {
        return f64::NAN;
    }
    let h: f64 = delta
        .iter()
        .map(|d| d.abs() / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h / (delta.len() as f64).ln()
}

fn trained_free_model() -> PoseRegressor {
    PoseRegressor::new(ArchDescriptor::default(), 4).unwrap()
}

#[test]
fn method_none_returns_batch_unchanged() {
    let batch = vec![random_tuple(ImageDims::DEFAULT, 3, 1), random_tuple(ImageDims::DEFAULT, 3, 2)];
    let pb = perturb_batch(&trained_free_model(), &batch, &LossParams::default(), &PerturberConfig::none(), PerturbOptions::default()).unwrap();
    assert_eq!(pb.tuples, batch);
    assert_eq!(pb.max_abs_delta(), 0.0);
}

#[test]
fn fgsm_moves_pixels_by_exactly_epsilon() {
    let batch = vec![random_tuple(ImageDims::DEFAULT, 3, 3)];
    let cfg = PerturberConfig { use_clip: false, ..PerturberConfig::fgsm() };
    let pb = perturb_batch(&trained_free_model(), &batch, &LossParams::default(), &cfg, PerturbOptions::default()).unwrap();
    let mut nonzero = 0;
    for (orig, adv) in batch[0].samples().iter().zip(pb.tuples[0].samples()) {
        for (x, y) in orig.pixels.data().iter().zip(adv.pixels.data()) {
            let d = (y - x).abs();
            assert!(d == 0.0 || (d - 0.3).abs() < 1e-12, "step {d}");
            nonzero += (d > 0.0) as usize;
        }
    }
    assert!(nonzero > 0);
}

#[test]
fn rada_defaults_respect_bounds() {
    let batch: Vec<_> = (0..4).map(|s| random_tuple(ImageDims::DEFAULT, 3, 10 + s)).collect();
    let th = batch_threshold(&batch, 10).unwrap();
    for eps in [158.0, 1e6] {
        let cfg = PerturberConfig { epsilon: eps, ..PerturberConfig::rada() };
        let pb = perturb_batch(&trained_free_model(), &batch, &LossParams::default(), &cfg, PerturbOptions::default()).unwrap();
        assert!(pb.max_abs_delta() <= th.eta_th + 1e-12);
        for t in &pb.tuples {
            assert!(t.samples().iter().all(|s| s.pixels.in_pixel_range()));
        }
    }
}

#[test]
fn pipeline_stages_run_in_order() {
    let batch = vec![random_tuple(ImageDims::DEFAULT, 3, 5)];
    let pb = perturb_batch(&trained_free_model(), &batch, &LossParams::default(), &PerturberConfig::rada(), PerturbOptions::default()).unwrap();
    let kinds: Vec<_> = pb
        .events
        .iter()
        .map(|e| match e {
            StageEvent::Threshold { .. } => 0,
            StageEvent::Gradient { .. } => 1,
            StageEvent::Clamp { .. } => 2,
            StageEvent::Clip { .. } => 3,
        })
        .collect();
    assert!(kinds.windows(2).all(|w| w[0] <= w[1]), "{kinds:?}");
    assert_eq!(kinds.first(), Some(&0));
    assert_eq!(kinds.last(), Some(&3));
}
