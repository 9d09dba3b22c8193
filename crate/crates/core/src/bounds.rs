//! Fisher information, Cramér–Rao covariance bounds and per-pixel variance maps.
//!
//! The quantum Fisher information of a coherent probe transmitted through `T(θ)`
//! is `F_ij = 4 N̄ Σ_p w |α_p|² ∂_iT_p ∂_jT_p` with pixel weight `w = 1/side²`.
//! Under the amplitude-squared convention this coincides with the classical
//! Poisson information `Σ_p ∂_iλ_p ∂_jλ_p / λ_p` of the detected counts.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EigenReport, Error, Result};
use crate::models::{render_transmittance_into, GridSpec, JacobianStack, ParamVector};
use crate::probe::{Convention, ExpectedMap, ProbeConfig};
use crate::seed::{derived_seed, rng_for};

/// Default relative eigenvalue floor for [`invert_fim`].
pub const DEFAULT_RCOND: f64 = 1e-10;
/// Samples per independently seeded Monte-Carlo chunk.
const MC_CHUNK: usize = 256;
/// Expected counts below this are treated as zero.
pub const LAMBDA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FisherKind {
    Quantum,
    ClassicalPoisson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    pub kind: FisherKind,
    /// Photon number the matrix was computed at, when known.
    pub n_bar: Option<f64>,
}

impl FisherMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        SymmetricEigen::new(self.matrix.clone()).eigenvalues
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.matrix.amax().max(f64::MIN_POSITIVE);
        (&self.matrix - self.matrix.transpose()).amax() <= rel_tol * scale
    }

    /// Eigenvalues ≥ −tol · trace.
    pub fn is_psd(&self, tol: f64) -> bool {
        let floor = -tol * self.matrix.trace().abs();
        self.eigenvalues().iter().all(|&e| e >= floor)
    }
}

/// `Σ = F⁻¹` with the eigenvalue report of `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBound {
    pub matrix: DMatrix<f64>,
    pub report: EigenReport,
}

impl CovarianceBound {
    pub fn zeros(n: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(n, n),
            report: EigenReport { min: 0.0, max: 0.0, scaled_min: 0.0, scaled_max: 0.0 },
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceKind {
    QcrbJacobian,
    QcrbMonteCarlo,
    Sql,
    Hl,
}

impl fmt::Display for VarianceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceKind::QcrbJacobian => "qcrb_j",
            VarianceKind::QcrbMonteCarlo => "qcrb_mc",
            VarianceKind::Sql => "sql",
            VarianceKind::Hl => "hl",
        })
    }
}

/// Unit system of a variance map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    /// Squared transmittance.
    Transmittance,
    /// Detected-count units: `1/λ` and `1/λ²` for SQL and HL.
    Counts,
}

/// Per-pixel variance with its total over the finite pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    pub values: Array2<f64>,
    pub kind: VarianceKind,
    pub units: Units,
    pub total: f64,
    /// Pixels holding the `+∞` sentinel, left out of `total`.
    pub excluded: usize,
    /// Diagonal jitter added before the Cholesky factorisation (Monte-Carlo maps only).
    pub jitter: Option<f64>,
}

impl VarianceMap {
    fn from_values(values: Array2<f64>, kind: VarianceKind, units: Units) -> Self {
        let mut total = 0.0;
        let mut excluded = 0;
        for &v in values.iter() {
            if v.is_finite() {
                total += v;
            } else {
                excluded += 1;
            }
        }
        Self { values, kind, units, total, excluded, jitter: None }
    }
}

fn rows_matrix(jac: &JacobianStack) -> DMatrix<f64> {
    let n = jac.n_params();
    let n_pix = jac.side() * jac.side();
    DMatrix::from_row_slice(n, n_pix, jac.as_rows())
}

fn symmetrise(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Weighted Gram matrix `Σ_p s_p a_ip b_jp`.
fn weighted_gram(rows: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut scaled = rows.clone();
    for (mut col, &w) in scaled.column_iter_mut().zip(weights) {
        col *= w;
    }
    let mut f = &scaled * rows.transpose();
    symmetrise(&mut f);
    f
}

/// Quantum Fisher information `F_ij = 4 N̄ Σ_p w |α_p|² ∂_iT_p ∂_jT_p`.
pub fn qfim(jac: &JacobianStack, probe: &ProbeConfig) -> Result<FisherMatrix> {
    if jac.side() != probe.grid.side() {
        return Err(Error::dims(probe.grid.side(), jac.side()));
    }
    let scale = 4.0 * probe.n_bar * probe.grid.pixel_weight();
    let weights: Vec<f64> = probe.illumination.iter().map(|a| scale * a).collect();
    Ok(FisherMatrix {
        matrix: weighted_gram(&rows_matrix(jac), &weights),
        kind: FisherKind::Quantum,
        n_bar: Some(probe.n_bar),
    })
}

/// Classical Fisher information of independent Poisson counts, `Σ_p ∂_iλ ∂_jλ / λ`.
///
/// Pixels with `λ < 1e-12` are skipped when their derivatives all vanish. A
/// positive `λ` below the floor is kept when `max_i ∂_iλ² / λ` does not exceed
/// the largest value of that ratio over regular pixels, which is the case when
/// `∂λ` vanishes like `√λ` (the amplitude-squared convention near `T = 0`).
/// Any other sensitive pixel yields [`Error::SingularModel`].
pub fn classical_poisson_fim(dlam: &JacobianStack, lam: &ExpectedMap) -> Result<FisherMatrix> {
    if dlam.side() != lam.side() {
        return Err(Error::dims(lam.side(), dlam.side()));
    }
    let rows = rows_matrix(dlam);
    let ratio = |p: usize, l: f64| rows.column(p).iter().map(|d| d * d).fold(0.0, f64::max) / l;
    let regular_max = lam
        .0
        .iter()
        .enumerate()
        .filter(|&(_, &l)| l >= LAMBDA_FLOOR)
        .map(|(p, &l)| ratio(p, l))
        .fold(0.0, f64::max);
    let mut weights = Vec::with_capacity(rows.ncols());
    for (p, &l) in lam.0.iter().enumerate() {
        if l >= LAMBDA_FLOOR {
            weights.push(1.0 / l);
        } else if rows.column(p).iter().all(|&d| d == 0.0) {
            weights.push(0.0);
        } else if l > 0.0 && ratio(p, l) <= regular_max {
            weights.push(1.0 / l);
        } else {
            return Err(Error::SingularModel { pixel: p, lambda: l });
        }
    }
    Ok(FisherMatrix {
        matrix: weighted_gram(&rows, &weights),
        kind: FisherKind::ClassicalPoisson,
        n_bar: None,
    })
}

/// `Σ = F⁻¹` by symmetric eigendecomposition.
///
/// The matrix is first equilibrated to unit diagonal, `C = D^{-1/2} F D^{-1/2}`,
/// so the conditioning test does not depend on parameter units. Eigenvalues of
/// `C` below `rcond · max` (or a non-positive diagonal) yield
/// [`Error::IllConditioned`] instead of a pseudo-inverse.
pub fn invert_fim(fim: &FisherMatrix, rcond: f64) -> Result<CovarianceBound> {
    let mut f = fim.matrix.clone();
    symmetrise(&mut f);
    let raw = SymmetricEigen::new(f.clone()).eigenvalues;
    let (raw_min, raw_max) = (raw.min(), raw.max());
    let diag = f.diagonal();
    if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::IllConditioned(EigenReport {
            min: raw_min,
            max: raw_max,
            scaled_min: 0.0,
            scaled_max: raw_max.max(0.0),
        }));
    }
    // a power-of-two prescale is exact, so Σ scales exactly as 1/F
    let radix = 2f64.powi(diag.max().log2().floor() as i32);
    let f = f / radix;
    let inv_sqrt: DVector<f64> = f.diagonal().map(|d| 1.0 / d.sqrt());
    let c = DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| f[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    let eig = SymmetricEigen::new(c);
    let (smin, smax) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let report = EigenReport { min: raw_min, max: raw_max, scaled_min: smin, scaled_max: smax };
    if !(smin > rcond * smax) {
        return Err(Error::IllConditioned(report));
    }
    let inv_eig = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e));
    let c_inv = &eig.eigenvectors * inv_eig * eig.eigenvectors.transpose();
    let mut sigma =
        DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| c_inv[(i, j)] * inv_sqrt[i] * inv_sqrt[j] / radix);
    symmetrise(&mut sigma);
    Ok(CovarianceBound { matrix: sigma, report })
}

/// Per-pixel `Var[T_p] = J_pᵀ Σ J_p`.
pub fn variance_map_jacobian(jac: &JacobianStack, sigma: &CovarianceBound) -> Result<VarianceMap> {
    let n = jac.n_params();
    if sigma.matrix.nrows() != n {
        return Err(Error::dims(n, sigma.matrix.nrows()));
    }
    let rows = rows_matrix(jac);
    let m = &sigma.matrix * &rows;
    let side = jac.side();
    let values = Array2::from_shape_fn((side, side), |(r, c)| {
        let p = r * side + c;
        rows.column(p).dot(&m.column(p))
    });
    Ok(VarianceMap::from_values(values, VarianceKind::QcrbJacobian, Units::Transmittance))
}

/// Cholesky factor of Σ in equilibrated form, with the jitter that was needed.
fn sampling_factor(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = sigma.nrows();
    let mut s = sigma.clone();
    symmetrise(&mut s);
    if s.diagonal().iter().any(|&d| d < 0.0 || !d.is_finite()) {
        return Err(Error::NotPositiveSemidefinite { jitter: 0.0 });
    }
    let scale: DVector<f64> = s.diagonal().map(|d| if d > 0.0 { d.sqrt() } else { 1.0 });
    let c = DMatrix::from_fn(n, n, |i, j| s[(i, j)] / (scale[i] * scale[j]));
    if let Some(ch) = c.clone().cholesky() {
        return Ok((DMatrix::from_diagonal(&scale) * ch.l(), 0.0));
    }
    let jitter = 1e-12 * c.trace();
    let jittered = &c + DMatrix::identity(n, n) * jitter;
    match jittered.cholesky() {
        Some(ch) if jitter > 0.0 => Ok((DMatrix::from_diagonal(&scale) * ch.l(), jitter)),
        _ => Err(Error::NotPositiveSemidefinite { jitter }),
    }
}

/// Monte-Carlo pixel variance: draw `θ_s ~ N(θ, Σ)`, render each image and take the
/// population variance per pixel.
///
/// Samples are drawn in chunks of 256; chunk `k` uses `derived_seed(seed, k)` and
/// partial sums are combined in chunk order, so the map is independent of the
/// thread count.
pub fn variance_map_mc(
    theta: &ParamVector,
    sigma: &CovarianceBound,
    grid: &GridSpec,
    n_samples: usize,
    seed: u64,
) -> Result<VarianceMap> {
    let n = theta.len();
    if sigma.matrix.nrows() != n {
        return Err(Error::dims(n, sigma.matrix.nrows()));
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument("Monte-Carlo needs at least two samples".into()));
    }
    let n_pix = grid.n_pix();
    let mut map = if sigma.matrix.iter().all(|&v| v == 0.0) {
        VarianceMap::from_values(Array2::zeros(grid.shape()), VarianceKind::QcrbMonteCarlo, Units::Transmittance)
    } else {
        let (factor, jitter) = sampling_factor(&sigma.matrix)?;
        let mut base = vec![0.0; n_pix];
        render_transmittance_into(theta, grid, &mut base);
        let n_chunks = n_samples.div_ceil(MC_CHUNK);
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chunks)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng_for(derived_seed(seed, k as u64));
                let count = MC_CHUNK.min(n_samples - k * MC_CHUNK);
                let mut s1 = vec![0.0; n_pix];
                let mut s2 = vec![0.0; n_pix];
                let mut img = vec![0.0; n_pix];
                let mut sample = theta.clone();
                for _ in 0..count {
                    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                    let dz = &factor * z;
                    for (v, (t, d)) in sample.values.iter_mut().zip(theta.values.iter().zip(dz.iter())) {
                        *v = t + d;
                    }
                    render_transmittance_into(&sample, grid, &mut img);
                    for p in 0..n_pix {
                        let d = img[p] - base[p];
                        s1[p] += d;
                        s2[p] += d * d;
                    }
                }
                (s1, s2)
            })
            .collect();
        let mut s1 = vec![0.0; n_pix];
        let mut s2 = vec![0.0; n_pix];
        for (a, b) in &partials {
            for p in 0..n_pix {
                s1[p] += a[p];
                s2[p] += b[p];
            }
        }
        let inv = 1.0 / n_samples as f64;
        let values = Array2::from_shape_fn(grid.shape(), |(r, c)| {
            let p = r * grid.side() + c;
            let mean = s1[p] * inv;
            (s2[p] * inv - mean * mean).max(0.0)
        });
        let mut map = VarianceMap::from_values(values, VarianceKind::QcrbMonteCarlo, Units::Transmittance);
        map.jitter = Some(jitter);
        map
    };
    if map.jitter.is_none() {
        map.jitter = Some(0.0);
    }
    Ok(map)
}

fn recip_map(lam: &ExpectedMap, power: i32, kind: VarianceKind) -> VarianceMap {
    let values = lam.0.mapv(|l| if l > 0.0 { l.powi(-power) } else { f64::INFINITY });
    VarianceMap::from_values(values, kind, Units::Counts)
}

/// Fisher matrix, covariance bound and Jacobian-propagated map for one `θ`.
#[derive(Debug, Clone)]
pub struct QcrbResult {
    pub fim: FisherMatrix,
    pub sigma: CovarianceBound,
    pub map: VarianceMap,
}

/// `qfim → invert_fim → variance_map_jacobian` at `θ`.
pub fn qcrb(theta: &ParamVector, probe: &ProbeConfig, rcond: f64) -> Result<QcrbResult> {
    let jac = crate::models::analytic_jacobian(theta, &probe.grid);
    let fim = qfim(&jac, probe)?;
    let sigma = invert_fim(&fim, rcond)?;
    let map = variance_map_jacobian(&jac, &sigma)?;
    Ok(QcrbResult { fim, sigma, map })
}

/// Shot-noise limit `1/λ` per pixel (count units); zero pixels hold `+∞`.
pub fn sql_map(lam: &ExpectedMap) -> VarianceMap {
    recip_map(lam, 1, VarianceKind::Sql)
}

/// Heisenberg limit `1/λ²` per pixel (count units); zero pixels hold `+∞`.
pub fn hl_map(lam: &ExpectedMap) -> VarianceMap {
    recip_map(lam, 2, VarianceKind::Hl)
}

/// Count-unit limits converted to transmittance units.
///
/// The relative count variance `1/λ` (SQL) or `1/λ²` (HL) is turned into an
/// absolute count variance (`× λ²`) and divided by the squared gain
/// `G = ∂λ/∂T`: `SQL_T = λ/G²`, `HL_T = 1/G²`. For the amplitude-squared
/// convention `SQL_T = side²/(4 N̄ |α|²)`, the delta-method variance of the
/// plug-in estimator.
pub fn limit_map_transmittance(lam: &ExpectedMap, probe: &ProbeConfig, kind: VarianceKind) -> Result<VarianceMap> {
    if !matches!(kind, VarianceKind::Sql | VarianceKind::Hl) {
        return Err(Error::InvalidArgument(format!("{kind} is not a per-pixel limit")));
    }
    if lam.side() != probe.grid.side() {
        return Err(Error::dims(probe.grid.side(), lam.side()));
    }
    let scale = probe.pixel_scale();
    let mut values = Array2::zeros(lam.0.dim());
    ndarray::Zip::from(&mut values).and(&lam.0).and(&scale).for_each(|v, &l, &c| {
        let gain = match probe.convention {
            Convention::IntensityLinear => c,
            Convention::AmplitudeSquared => 2.0 * (c * l.max(0.0)).sqrt(),
        };
        *v = if gain > 0.0 && l > 0.0 {
            match kind {
                VarianceKind::Sql => l / (gain * gain),
                _ => 1.0 / (gain * gain),
            }
        } else {
            f64::INFINITY
        };
    });
    let mut map = VarianceMap::from_values(values, kind, Units::Transmittance);
    map.units = Units::Transmittance;
    Ok(map)
}
