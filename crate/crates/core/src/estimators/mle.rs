//! Poisson maximum-likelihood fit of a parametric family.
//!
//! The negative log-likelihood `Σ λ − k ln λ` (the `ln k!` constant is dropped)
//! is minimised by Levenberg–Marquardt steps on the Fisher-scoring matrix
//! `H = Σ ∂λ ∂λᵀ / λ`. A start has converged when every parameter's gradient
//! is below `gradient_tolerance` standard errors, `|gᵢ| / √Hᵢᵢ`. Amplitude
//! components pinned at a bound with an outward gradient are exempt.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{render_transmittance_into, sample_params_with};
use crate::models::{eval_with_jacobian, Family, ParamBounds, ParamKind, ParamVector};
use crate::probe::{expected_with_jacobian, Frame, ProbeConfig};
use crate::seed::rng_for;

use super::spectral::spectral_init;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlConfig {
    /// Number of starting points, the spectral guess included.
    pub multistart: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the gradient in standard-error units.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    /// Expected counts are floored here inside the likelihood.
    pub lambda_floor: f64,
    /// Seed of the perturbed and random starts.
    pub seed: u64,
    /// Region for random starts. `None` means the standard bounds of the grid.
    pub bounds: Option<ParamBounds>,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self {
            multistart: 8,
            max_iterations: 200,
            gradient_tolerance: 1e-9,
            initial_damping: 1e-3,
            lambda_floor: 1e-12,
            seed: 0,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Canonical form of the estimate.
    pub theta: ParamVector,
    /// Estimate as reached by the optimiser, before canonicalisation.
    pub raw: ParamVector,
    pub converged: bool,
    pub iterations: usize,
    pub nll: f64,
    /// Largest `|gᵢ| / √Hᵢᵢ` at the estimate.
    pub scaled_gradient: f64,
    /// Index of the winning start; 0 is the spectral guess when it succeeded.
    pub start: usize,
}

struct Problem<'a> {
    counts: &'a [f64],
    probe: &'a ProbeConfig,
    scale: Vec<f64>,
    floor: f64,
    buf: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(counts: &'a [f64], probe: &'a ProbeConfig, floor: f64) -> Self {
        let scale = probe.pixel_scale().iter().copied().collect();
        Self { counts, probe, scale, floor, buf: vec![0.0; counts.len()] }
    }

    fn nll(&mut self, theta: &ParamVector) -> f64 {
        self.nll_with_magnitude(theta).0
    }

    /// NLL and the sum of its terms' magnitudes, which sets its rounding level.
    fn nll_with_magnitude(&mut self, theta: &ParamVector) -> (f64, f64) {
        render_transmittance_into(theta, &self.probe.grid, &mut self.buf);
        let conv = self.probe.convention;
        let (mut s, mut m) = (0.0, 0.0);
        for ((&t, &c), &k) in self.buf.iter().zip(&self.scale).zip(self.counts) {
            let lam = (c * conv.g(t)).max(self.floor);
            let log_term = if k > 0.0 { k * lam.ln() } else { 0.0 };
            s += lam - log_term;
            m += lam.abs() + log_term.abs();
        }
        (s, m)
    }

    /// Gradient and scoring matrix of the likelihood.
    fn derivatives(&self, theta: &ParamVector) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (t, jac) = eval_with_jacobian(theta, &self.probe.grid);
        let (lam, dlam) = expected_with_jacobian(&t, &jac, self.probe)?;
        let n = theta.len();
        let n_pix = self.counts.len();
        let rows = dlam.as_rows();
        let lam = lam.0.as_slice().expect("contiguous");
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        let mut w = vec![0.0; n_pix];
        let mut r = vec![0.0; n_pix];
        for p in 0..n_pix {
            let l = lam[p].max(self.floor);
            w[p] = 1.0 / l;
            r[p] = 1.0 - self.counts[p] / l;
        }
        for i in 0..n {
            let di = &rows[i * n_pix..(i + 1) * n_pix];
            g[i] = di.iter().zip(&r).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                let dj = &rows[j * n_pix..(j + 1) * n_pix];
                let v: f64 = di.iter().zip(dj).zip(&w).map(|((a, b), c)| a * b * c).sum();
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Ok((g, h))
    }
}

/// Amplitudes clamped to [0, 1] and rescaled so that they sum to at most 1.
fn project(family: Family, v: &mut [f64]) {
    let n_free = family.n_free_amplitudes();
    for a in v[..n_free].iter_mut() {
        *a = a.clamp(0.0, 1.0);
    }
    let sum: f64 = v[..n_free].iter().sum();
    if sum > 1.0 {
        for a in v[..n_free].iter_mut() {
            *a /= sum;
        }
    }
}

fn scaled_gradient(theta: &ParamVector, g: &DVector<f64>, h: &DMatrix<f64>) -> f64 {
    let n_free = theta.family.n_free_amplitudes();
    let amp_sum: f64 = theta.values[..n_free].iter().sum();
    let mut worst: f64 = 0.0;
    for i in 0..g.len() {
        if i < n_free {
            let a = theta.values[i];
            // descent along −g would leave the feasible set
            if (a <= 0.0 && g[i] > 0.0) || ((a >= 1.0 || amp_sum >= 1.0) && g[i] < 0.0) {
                continue;
            }
        }
        let d = h[(i, i)];
        let s = if d > 0.0 { g[i].abs() / d.sqrt() } else if g[i] == 0.0 { 0.0 } else { f64::INFINITY };
        worst = worst.max(s);
    }
    worst
}

fn solve_damped(g: &DVector<f64>, h: &DMatrix<f64>, mu: f64) -> Option<DVector<f64>> {
    let n = g.len();
    let mut a = h.clone();
    let max_diag = (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-300);
    for i in 0..n {
        a[(i, i)] += mu * h[(i, i)].max(1e-12 * max_diag);
    }
    let rhs = -g;
    match a.clone().cholesky() {
        Some(c) => Some(c.solve(&rhs)),
        None => a.lu().solve(&rhs),
    }
}

fn fit_from(problem: &mut Problem, start: ParamVector, cfg: &MlConfig, index: usize) -> Result<FitResult> {
    let family = start.family;
    let mut theta = start;
    project(family, &mut theta.values);
    let (mut nll, magnitude) = problem.nll_with_magnitude(&theta);
    // NLL differences below this are rounding noise
    let nll_noise = 64.0 * f64::EPSILON * magnitude;
    let mut mu = cfg.initial_damping;
    let mut converged = false;
    let mut iterations = 0;
    let (mut g, mut h) = problem.derivatives(&theta)?;
    let mut sg = scaled_gradient(&theta, &g, &h);
    'outer: while iterations < cfg.max_iterations {
        if sg <= cfg.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        loop {
            let Some(step) = solve_damped(&g, &h, mu) else {
                mu *= 10.0;
                if mu > 1e12 {
                    break 'outer;
                }
                continue;
            };
            let mut values: Vec<f64> = theta.values.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            project(family, &mut values);
            if values.iter().all(|v| v.is_finite()) {
                let trial = ParamVector { family, values };
                let trial_nll = problem.nll(&trial);
                let predicted = -g.dot(&step) - 0.5 * step.dot(&(&h * &step));
                let mut next = None;
                if trial_nll <= nll {
                    next = Some(problem.derivatives(&trial)?);
                } else if predicted <= nll_noise && trial_nll <= nll + nll_noise {
                    // the likelihood cannot resolve the step; judge it by the gradient
                    let (tg, th) = problem.derivatives(&trial)?;
                    if scaled_gradient(&trial, &tg, &th) < sg {
                        next = Some((tg, th));
                    }
                }
                if let Some((ng, nh)) = next {
                    let moved = trial.values != theta.values;
                    theta = trial;
                    nll = trial_nll;
                    mu = (mu / 3.0).max(1e-15);
                    (g, h) = (ng, nh);
                    sg = scaled_gradient(&theta, &g, &h);
                    if !moved {
                        // a zero step that cannot lower the likelihood further
                        converged = sg <= cfg.gradient_tolerance;
                        break 'outer;
                    }
                    break;
                }
            }
            mu *= 4.0;
            if mu > 1e12 {
                break 'outer;
            }
        }
    }
    if !converged && sg <= cfg.gradient_tolerance {
        converged = true;
    }
    Ok(FitResult {
        theta: theta.canonical(),
        raw: theta,
        converged,
        iterations,
        nll,
        scaled_gradient: sg,
        start: index,
    })
}

fn starts(counts: &Array2<f64>, family: Family, probe: &ProbeConfig, cfg: &MlConfig) -> Result<Vec<ParamVector>> {
    let bounds = match &cfg.bounds {
        Some(b) if b.family == family => b.clone(),
        Some(_) => return Err(Error::InvalidArgument("start bounds belong to another family".into())),
        None => ParamBounds::standard(family, probe.grid.side()),
    };
    bounds.validate()?;
    let n = cfg.multistart.max(1);
    let mut rng = rng_for(cfg.seed);
    let mut out = Vec::with_capacity(n);
    if let Ok(init) = spectral_init(counts, family, &probe.grid) {
        let n_perturbed = (n - 1) / 2;
        out.push(init.clone());
        let kinds = family.param_kinds();
        for _ in 0..n_perturbed {
            let mut v = init.values.clone();
            for ((x, &(lo, hi)), kind) in v.iter_mut().zip(&bounds.ranges).zip(&kinds) {
                let width = match kind {
                    ParamKind::Frequency => x.abs().max(lo.abs()),
                    _ => hi - lo,
                };
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += 0.1 * width * z;
            }
            project(family, &mut v);
            out.push(ParamVector { family, values: v });
        }
    }
    while out.len() < n {
        out.push(sample_params_with(family, &bounds, &mut rng)?);
    }
    Ok(out)
}

/// Multistart fit to real-valued counts; integer frames go through [`ml_fit`].
///
/// The start with the lowest likelihood wins. When no start converged the
/// error carries the best partial result.
pub fn ml_fit_counts(
    counts: &Array2<f64>,
    family: Family,
    probe: &ProbeConfig,
    cfg: &MlConfig,
) -> Result<FitResult> {
    if counts.dim() != probe.grid.shape() {
        return Err(Error::dims(format!("{:?}", probe.grid.shape()), format!("{:?}", counts.dim())));
    }
    if counts.iter().any(|&k| !(k >= 0.0) || !k.is_finite()) {
        return Err(Error::InvalidArgument("counts must be finite and non-negative".into()));
    }
    let flat: Vec<f64> = counts.iter().copied().collect();
    let mut problem = Problem::new(&flat, probe, cfg.lambda_floor);
    let mut best: Option<FitResult> = None;
    let mut any_converged = false;
    for (i, s) in starts(counts, family, probe, cfg)?.into_iter().enumerate() {
        let r = fit_from(&mut problem, s, cfg, i)?;
        any_converged |= r.converged;
        if best.as_ref().is_none_or(|b| r.nll < b.nll) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    if !any_converged {
        let best_nll = best.nll;
        return Err(Error::NonConvergence { best: Box::new(best), best_nll });
    }
    Ok(best)
}

pub fn ml_fit(frame: &Frame, family: Family, probe: &ProbeConfig, cfg: &MlConfig) -> Result<FitResult> {
    ml_fit_counts(&frame.to_f64(), family, probe, cfg)
}
