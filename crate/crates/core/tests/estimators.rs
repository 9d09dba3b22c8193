use ndarray::Array2;
use qlimit::bounds::{classical_poisson_fim, invert_fim};
use qlimit::estimators::{ml_fit, ml_fit_counts, plugin_estimate, run_ensemble, Estimator, MlConfig};
use qlimit::models::{analytic_jacobian, render, Family, GridSpec, ParamVector};
use qlimit::probe::{expected_counts, expected_with_jacobian, sample_ensemble, Convention, Frame, ProbeConfig};

fn probe(side: usize, n_bar: f64, convention: Convention) -> ProbeConfig {
    ProbeConfig::uniform(n_bar, convention, GridSpec::new(side).unwrap()).unwrap()
}

#[test]
fn plugin_inverts_the_detector_response() {
    // 4×4 grid, N̄ = 64: four photons per fully open pixel
    let counts = Array2::from_shape_vec((4, 4), (0..16u32).map(|k| k % 6).collect()).unwrap();
    let frame = Frame { counts: counts.clone(), seed: 0 };
    let sq = plugin_estimate(&frame, &probe(4, 64.0, Convention::AmplitudeSquared)).unwrap();
    let lin = plugin_estimate(&frame, &probe(4, 64.0, Convention::IntensityLinear)).unwrap();
    for ((&k, &a), &b) in counts.iter().zip(sq.0.iter()).zip(lin.0.iter()) {
        let r = k as f64 / 4.0;
        assert!((a - r.sqrt().min(1.0)).abs() < 1e-15);
        assert!((b - r.min(1.0)).abs() < 1e-15);
    }
}

#[test]
fn noiseless_counts_recover_single_linear_truth() {
    let p = probe(48, 5e4, Convention::AmplitudeSquared);
    for values in [vec![0.05, 0.4, 2.0], vec![0.02, -1.0, -5.0], vec![0.07, 1.4, 0.3]] {
        let truth = ParamVector::new(Family::SingleLinear, values).unwrap();
        let lam = expected_counts(&render(&truth, &p.grid), &p).unwrap();
        let fit = ml_fit_counts(&lam.0, Family::SingleLinear, &p, &MlConfig::default()).unwrap();
        assert!(fit.converged);
        let err = fit.theta.aligned_max_abs_diff(&truth);
        assert!(err < 1e-6, "{truth:?} -> {:?} ({err:e})", fit.theta);
    }
}

#[test]
fn noiseless_counts_recover_radial_image() {
    let p = probe(32, 1e5, Convention::AmplitudeSquared);
    let truth = ParamVector::new(Family::RadialLinear, vec![0.55, 0.09, 0.7, 0.06, 1.0, -1.5]).unwrap();
    let t = render(&truth, &p.grid);
    let lam = expected_counts(&t, &p).unwrap();
    let fit = ml_fit_counts(&lam.0, Family::RadialLinear, &p, &MlConfig::default()).unwrap();
    let err = (&render(&fit.theta, &p.grid).0 - &t.0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-6, "image error {err:e}");
}

#[test]
fn mle_covariance_matches_inverse_fisher() {
    // at ~100 photons per open pixel the MLE is efficient; 300 frames give ~8% s.e. on each variance
    let p = probe(32, 1e5, Convention::AmplitudeSquared);
    let truth = ParamVector::new(Family::SingleLinear, vec![0.06, 0.5, 1.0]).unwrap();
    let t = render(&truth, &p.grid);
    let jac = analytic_jacobian(&truth, &p.grid);
    let (lam, dlam) = expected_with_jacobian(&t, &jac, &p).unwrap();
    let crb = invert_fim(&classical_poisson_fim(&dlam, &lam).unwrap(), 1e-10).unwrap().diagonal();

    let frames = sample_ensemble(&lam, 300, 41).unwrap();
    let cfg = MlConfig { multistart: 4, ..MlConfig::default() };
    let est: Vec<Vec<f64>> = frames
        .frames
        .iter()
        .map(|f| ml_fit(f, Family::SingleLinear, &p, &cfg).unwrap().theta.aligned_to(&truth).values)
        .collect();
    for i in 0..3 {
        let mean = est.iter().map(|v| v[i]).sum::<f64>() / est.len() as f64;
        let var = est.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / (est.len() - 1) as f64;
        let ratio = var / crb[i];
        assert!((ratio - 1.0).abs() < 0.3, "param {i}: var/CRB = {ratio}");
    }
}

#[test]
fn ensemble_preserves_frame_order() {
    let p = probe(16, 2000.0, Convention::AmplitudeSquared);
    let t = render(&ParamVector::new(Family::SingleLinear, vec![0.1, 0.2, 0.0]).unwrap(), &p.grid);
    let frames = sample_ensemble(&expected_counts(&t, &p).unwrap(), 12, 5).unwrap();
    let out = run_ensemble(&frames, &p, &Estimator::PlugIn).unwrap();
    for (i, f) in frames.frames.iter().enumerate() {
        assert_eq!(out.image(i), plugin_estimate(f, &p).unwrap().0);
    }
}
