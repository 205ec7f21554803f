mod common;

use proptest::prelude::*;
use radaug_core::analysis::{compare_methods, concentration, subsquare_histogram, HistogramMode};
use radaug_core::domain::{ImageDims, LandmarkMask, Perturbation, Weather};
use radaug_core::loss::LossParams;
use radaug_core::model::{ArchDescriptor, PoseModel};
use radaug_core::perturb::{raw_perturbation, PerturberConfig};
use radaug_core::trainer::init_model;

/// Cell sums by explicit band boundaries, independent of the library's indexing.
fn oracle_cells(delta: &Perturbation) -> [[f64; 3]; 3] {
    let d = delta.dims();
    let bounds = |len: usize| [len / 3, 2 * (len / 3)];
    let (rb, cb) = (bounds(d.height), bounds(d.width));
    let which = |p: usize, b: [usize; 2]| if p < b[0] { 0 } else if p < b[1] { 1 } else { 2 };
    let mut grid = [[0.0; 3]; 3];
    let mut total = 0.0;
    for (i, v) in delta.delta().iter().enumerate() {
        let pixel = i / d.channels;
        let (row, col) = (pixel / d.width, pixel % d.width);
        if v.abs() > 1e-6 {
            grid[which(row, rb)][which(col, cb)] += v.abs();
            total += v.abs();
        }
    }
    for c in grid.iter_mut().flatten() {
        *c /= total;
    }
    grid
}

fn delta_strategy() -> impl Strategy<Value = Perturbation> {
    (3usize..20, 3usize..20, 1usize..4).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-30.0..30.0f64, h * w * c)
            .prop_map(move |v| Perturbation::new(ImageDims::new(h, w, c), v).unwrap())
    })
}

fn mask_for(d: ImageDims, bits: &[bool]) -> LandmarkMask {
    let n = d.height * d.width;
    LandmarkMask::new(d.height, d.width, (0..n).map(|i| bits[i % bits.len()]).collect()).unwrap()
}

proptest! {
    #[test]
    fn histogram_matches_brute_force(delta in delta_strategy()) {
        let h = subsquare_histogram(&delta, 1e-6, HistogramMode::Mass).unwrap();
        prop_assume!(!h.empty);
        let oracle = oracle_cells(&delta);
        for r in 0..3 {
            for c in 0..3 {
                prop_assert!((h.grid[r][c] - oracle[r][c]).abs() <= 1e-12);
            }
        }
        prop_assert!((h.cells().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn concentration_is_scale_invariant(delta in delta_strategy(), bits in prop::collection::vec(any::<bool>(), 1..7), c in 1e-3..1e3f64) {
        let mask = mask_for(delta.dims(), &bits);
        let a = concentration(&delta, &mask).unwrap();
        let b = concentration(&delta.scaled(c), &mask).unwrap();
        prop_assert_eq!(a.landmark_pixel_fraction, b.landmark_pixel_fraction);
        match (a.landmark_mass_fraction, b.landmark_mass_fraction) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
        match (a.concentration_ratio, b.concentration_ratio) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0)),
            (x, y) => prop_assert_eq!(x, y),
        }
    }
}

/// On gradient fields from a model looking at synthetic frames, spatial
/// entropy falls as pow rises.
#[test]
fn entropy_orders_by_pow() {
    let ds = common::dataset(5, 40, 0.5, &[(Weather::Overcast, 1.0)], 2);
    let model = init_model(&ArchDescriptor::default(), 5, &ds).unwrap();
    let params = LossParams::default();
    let mut ordered = 0;
    let mut total = 0;
    for t in ds.tuples().iter().step_by(2) {
        let (_, grads) = model.input_gradient(t, &params).unwrap();
        for g in &grads {
            let e = |pow| {
                let r = raw_perturbation(g, 1.0, pow).unwrap();
                subsquare_histogram(&r, 0.0, HistogramMode::Mass).unwrap().entropy()
            };
            let (rada, fgm, fgsm) = (e(1.5), e(1.0), e(0.0));
            total += 1;
            ordered += (rada <= fgm && fgm <= fgsm) as usize;
        }
    }
    assert!(ordered * 10 >= total * 8, "{ordered}/{total} frames ordered");
}

#[test]
fn comparison_covers_each_method_and_stays_in_range() {
    let ds = common::dataset(6, 10, 0.0, &[(Weather::Snow, 1.0)], 3);
    let model = init_model(&ArchDescriptor::default(), 1, &ds).unwrap();
    let methods = [PerturberConfig::gaussian(), PerturberConfig::fgsm(), PerturberConfig::rada()];
    let tuple = &ds.tuples()[2];
    let masks: Vec<_> = (2..5).map(|i| ds.masks()[i].clone()).collect();
    let out = compare_methods(&model, tuple, &masks, &LossParams::default(), &methods, 1e-6, HistogramMode::Mass).unwrap();
    assert_eq!(out.len(), 3);
    for (m, r) in methods.iter().zip(&out) {
        assert_eq!(r.method, m.method);
        assert_eq!(r.histograms.len(), 3);
        assert!(r.strip.in_pixel_range());
    }
}
