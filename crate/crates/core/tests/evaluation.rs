use ndarray::{Array2, Array3};
use proptest::prelude::*;
use qlimit::bounds::{hl_map, sql_map};
use qlimit::estimators::{EstimatorKind, ReconstructionEnsemble};
use qlimit::evaluation::{bias_variance, compare_bounds, gdl, mse_map, pixel_histogram, ssim};
use qlimit::models::Transmittance;
use qlimit::probe::ExpectedMap;

fn ensemble(images: Array3<f64>) -> ReconstructionEnsemble {
    ReconstructionEnsemble {
        images,
        provenance: EstimatorKind::External,
        clip_fraction: 0.0,
        failures: Vec::new(),
        fits: None,
    }
}

proptest! {
    #[test]
    fn mse_splits_into_bias_and_variance(
        frames in 2usize..6,
        data in prop::collection::vec(0.0f64..1.0, 6 * 16),
        truth in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let images = Array3::from_shape_vec((frames, 4, 4), data[..frames * 16].to_vec()).unwrap();
        let t = Transmittance(Array2::from_shape_vec((4, 4), truth).unwrap());
        let e = ensemble(images);
        let report = mse_map(&e, &t).unwrap();
        let (b, v) = bias_variance(&e, &t).unwrap();
        for p in 0..16 {
            let (r, c) = (p / 4, p % 4);
            prop_assert!((report.mse_map[(r, c)] - b[(r, c)] - v[(r, c)]).abs() < 1e-14);
            // direct definition
            let col: Vec<f64> = (0..frames).map(|f| e.images[(f, r, c)]).collect();
            let mse = col.iter().map(|x| (x - t.0[(r, c)]).powi(2)).sum::<f64>() / frames as f64;
            prop_assert!((report.mse_map[(r, c)] - mse).abs() < 1e-14);
        }
        prop_assert!((report.total_mse - report.mse_map.sum()).abs() < 1e-12);
    }

    #[test]
    fn ssim_and_gdl_identity(data in prop::collection::vec(0.0f64..1.0, 144)) {
        let a = Array2::from_shape_vec((12, 12), data).unwrap();
        prop_assert!((ssim(&a, &a, 11).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(gdl(&a, &a).unwrap(), 0.0);
        // constant offsets leave gradients unchanged
        prop_assert!(gdl(&a, &a.mapv(|v| v + 0.25)).unwrap() < 1e-28);
    }
}

#[test]
fn constant_offset_has_pure_bias() {
    let t = Transmittance(Array2::from_elem((8, 8), 0.5));
    let e = ensemble(Array3::from_elem((3, 8, 8), 0.6));
    let r = mse_map(&e, &t).unwrap();
    assert!((r.total_mse - 64.0 * 0.01).abs() < 1e-12);
    assert_eq!(r.total_variance(), Some(0.0));
}

#[test]
fn ratios_against_count_limits() {
    let t = Transmittance(Array2::from_elem((2, 2), 0.5));
    let e = ensemble(Array3::from_shape_vec((2, 2, 2), vec![0.4, 0.5, 0.5, 0.5, 0.6, 0.5, 0.5, 0.5]).unwrap());
    let mut r = mse_map(&e, &t).unwrap();
    let lam = ExpectedMap(Array2::from_elem((2, 2), 10.0));
    let ratios = compare_bounds(&mut r, &[sql_map(&lam), hl_map(&lam)]).unwrap();
    // total MSE 0.01; SQL total 4·0.1, HL total 4·0.01
    assert!((ratios[0].ratio - 0.01 / 0.4).abs() < 1e-12);
    assert!((ratios[1].ratio - 0.01 / 0.04).abs() < 1e-12);
}

#[test]
fn histogram_of_gaussian_pixel_fits_its_moments() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let n = Normal::new(0.4, 0.05).unwrap();
    let images = Array3::from_shape_fn((20_000, 2, 2), |_| n.sample(&mut rng));
    let d = pixel_histogram(&ensemble(images), (1, 0), 40).unwrap();
    assert!(!d.degenerate);
    assert!((d.fit.mean - 0.4).abs() < 2e-3, "{:?}", d.fit);
    assert!((d.fit.sigma - 0.05).abs() < 2e-3, "{:?}", d.fit);
}
