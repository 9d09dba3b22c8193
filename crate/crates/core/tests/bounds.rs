use ndarray::{Array2, Array3};
use proptest::prelude::*;
use qlimit::bounds::{classical_poisson_fim, qcrb, variance_map_mc, FisherKind};
use qlimit::models::{analytic_jacobian, render, sample_params, Family, GridSpec, JacobianStack, ParamBounds, ParamVector};
use qlimit::probe::{expected_with_jacobian, Convention, ExpectedMap, ProbeConfig};
use qlimit::Error;

const RCOND: f64 = 1e-10;

fn family() -> impl Strategy<Value = Family> {
    prop::sample::select(Family::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    // Σ_pix J Σ Jᵀ = tr(Σ JᵀJ) with F = (4N̄/n_pix) JᵀJ, so the total is n_params·n_pix/(4N̄) for any θ
    #[test]
    fn jacobian_total_has_closed_form(family in family(), seed in any::<u64>(), n_bar in 10.0f64..1e6) {
        let side = 32;
        let th = sample_params(family, &ParamBounds::standard(family, side), seed).unwrap();
        let probe = ProbeConfig::uniform(n_bar, Convention::AmplitudeSquared, GridSpec::new(side).unwrap()).unwrap();
        match qcrb(&th, &probe, RCOND) {
            Ok(r) => {
                let expect = (family.n_params() * side * side) as f64 / (4.0 * n_bar);
                // inversion error grows with the equilibrated condition number
                let kappa = r.sigma.report.scaled_max / r.sigma.report.scaled_min;
                let tol = (64.0 * f64::EPSILON * kappa).max(1e-12);
                prop_assert!((r.map.total - expect).abs() < tol * expect, "{} vs {} (κ {:e})", r.map.total, expect, kappa);
                prop_assert!(r.fim.is_symmetric(1e-12));
                prop_assert!(r.fim.is_psd(0.0));
                prop_assert!(r.map.values.iter().all(|&v| v >= 0.0));
            }
            Err(Error::IllConditioned(_)) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn quantum_fisher_equals_classical_under_amplitude_convention(family in family(), seed in any::<u64>()) {
        let g = GridSpec::new(24).unwrap();
        let th = sample_params(family, &ParamBounds::standard(family, 24), seed).unwrap();
        let probe = ProbeConfig::uniform(500.0, Convention::AmplitudeSquared, g).unwrap();
        let (t, j) = (render(&th, &probe.grid), analytic_jacobian(&th, &probe.grid));
        let (lam, dlam) = expected_with_jacobian(&t, &j, &probe).unwrap();
        let classical = classical_poisson_fim(&dlam, &lam).unwrap();
        let quantum = qlimit::bounds::qfim(&j, &probe).unwrap();
        prop_assert_eq!(classical.kind, FisherKind::ClassicalPoisson);
        let scale = quantum.matrix.amax();
        prop_assert!((classical.matrix - quantum.matrix).amax() <= 1e-9 * scale);
    }
}

fn stack(values: &[f64]) -> JacobianStack {
    JacobianStack(Array3::from_shape_vec((1, 2, 2), values.to_vec()).unwrap())
}

fn lam(values: &[f64]) -> ExpectedMap {
    ExpectedMap(Array2::from_shape_vec((2, 2), values.to_vec()).unwrap())
}

#[test]
fn classical_fim_of_one_parameter_by_hand() {
    // Σ ∂λ²/λ = 4/1 + 1/4 + 0 + 9/9
    let f = classical_poisson_fim(&stack(&[2.0, 1.0, 0.0, 3.0]), &lam(&[1.0, 4.0, 2.0, 9.0])).unwrap();
    assert!((f.matrix[(0, 0)] - 5.25).abs() < 1e-15);
}

#[test]
fn classical_fim_keeps_vanishing_pixels_with_bounded_ratio() {
    // ∂λ ∝ √λ: the dim pixel's ratio ∂λ²/λ = 0.25 stays below the regular ones
    let f = classical_poisson_fim(&stack(&[1.0, 0.5e-10, 1.0, 1.0]), &lam(&[1.0, 1e-20, 1.0, 1.0])).unwrap();
    assert!((f.matrix[(0, 0)] - 3.25).abs() < 1e-12);
}

#[test]
fn classical_fim_rejects_singular_pixels() {
    let zero = classical_poisson_fim(&stack(&[1.0, 0.5, 1.0, 1.0]), &lam(&[1.0, 0.0, 1.0, 1.0]));
    assert!(matches!(zero, Err(Error::SingularModel { pixel: 1, .. })), "{zero:?}");
    let diverging = classical_poisson_fim(&stack(&[1.0, 1e-3, 1.0, 1.0]), &lam(&[1.0, 1e-20, 1.0, 1.0]));
    assert!(matches!(diverging, Err(Error::SingularModel { pixel: 1, .. })), "{diverging:?}");
}

#[test]
fn amplitude_zero_is_ill_conditioned() {
    let th = ParamVector::new(Family::DoubleLinear, vec![0.0, 0.05, 0.3, 0.5, 0.1, 1.0, -2.0]).unwrap();
    let probe = ProbeConfig::uniform(1000.0, Convention::AmplitudeSquared, GridSpec::new(16).unwrap()).unwrap();
    assert!(matches!(qcrb(&th, &probe, RCOND), Err(Error::IllConditioned(_))));
}

#[test]
fn monte_carlo_map_approaches_jacobian_map_when_linearisation_holds() {
    // large photon budget shrinks Σ until first-order propagation is exact up to sampling error
    let th = ParamVector::new(Family::RadialLinear, vec![0.55, 0.05, 0.7, 0.03, 1.0, -1.5]).unwrap();
    let probe = ProbeConfig::uniform(1e8, Convention::AmplitudeSquared, GridSpec::new(32).unwrap()).unwrap();
    let r = qcrb(&th, &probe, RCOND).unwrap();
    let mc = variance_map_mc(&th, &r.sigma, &probe.grid, 40_000, 9).unwrap();
    let rel = mc.total / r.map.total - 1.0;
    // sampling s.e. of a variance total is about √(2/n) ≈ 0.7%
    assert!(rel.abs() < 0.03, "MC/J − 1 = {rel}");
}

#[test]
fn monte_carlo_is_deterministic_per_seed() {
    let th = ParamVector::new(Family::SingleLinear, vec![0.05, 0.3, 1.0]).unwrap();
    let probe = ProbeConfig::uniform(1000.0, Convention::AmplitudeSquared, GridSpec::new(16).unwrap()).unwrap();
    let r = qcrb(&th, &probe, RCOND).unwrap();
    let a = variance_map_mc(&th, &r.sigma, &probe.grid, 5000, 1).unwrap();
    let b = variance_map_mc(&th, &r.sigma, &probe.grid, 5000, 1).unwrap();
    let c = variance_map_mc(&th, &r.sigma, &probe.grid, 5000, 2).unwrap();
    assert_eq!(a.values, b.values);
    assert_ne!(a.values, c.values);
}
