//! Scoring reconstruction ensembles against the truth and against precision limits.
//!
//! Variances use the population (1/n) convention so that
//! `MSE = bias² + variance` holds per pixel up to rounding. Totals over
//! pixels and means over frames use pairwise summation in a fixed order.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bounds::{Units, VarianceKind, VarianceMap};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, ReconstructionEnsemble};
use crate::models::Transmittance;

/// Pairwise sum; the split points depend only on the length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if v.len() <= LEAF {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn map_total(m: &Array2<f64>) -> f64 {
    match m.as_slice() {
        Some(s) => pairwise_sum(s),
        None => pairwise_sum(&m.iter().copied().collect::<Vec<_>>()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub mse_map: Array2<f64>,
    pub total_mse: f64,
    /// Present when the ensemble has at least two frames.
    pub bias_sq_map: Option<Array2<f64>>,
    pub variance_map: Option<Array2<f64>>,
    pub ratios: Vec<BoundRatio>,
    pub frames: usize,
    pub provenance: EstimatorKind,
}

impl EvaluationReport {
    pub fn total_bias_sq(&self) -> Option<f64> {
        self.bias_sq_map.as_ref().map(map_total)
    }

    pub fn total_variance(&self) -> Option<f64> {
        self.variance_map.as_ref().map(map_total)
    }
}

fn check_dims(recons: &ReconstructionEnsemble, truth: &Transmittance) -> Result<()> {
    let (_, h, w) = recons.images.dim();
    if (h, w) != truth.0.dim() {
        return Err(Error::dims(format!("{:?}", truth.0.dim()), format!("({h}, {w})")));
    }
    if recons.is_empty() {
        return Err(Error::InvalidArgument("empty reconstruction ensemble".into()));
    }
    Ok(())
}

/// Per-pixel mean over frames of `f(frame value, pixel index)`.
fn frame_mean(recons: &ReconstructionEnsemble, f: impl Fn(f64, (usize, usize)) -> f64) -> Array2<f64> {
    let (n, h, w) = recons.images.dim();
    let mut col = vec![0.0; n];
    Array2::from_shape_fn((h, w), |(r, c)| {
        for (k, v) in col.iter_mut().enumerate() {
            *v = f(recons.images[(k, r, c)], (r, c));
        }
        pairwise_sum(&col) / n as f64
    })
}

/// Per-pixel mean squared error and its total. Bias and variance are filled
/// in when the ensemble has at least two frames.
pub fn mse_map(recons: &ReconstructionEnsemble, truth: &Transmittance) -> Result<EvaluationReport> {
    check_dims(recons, truth)?;
    let t = &truth.0;
    let mse = frame_mean(recons, |v, p| (v - t[p]).powi(2));
    let (bias_sq_map, variance_map) = match bias_variance(recons, truth) {
        Ok((b, v)) => (Some(b), Some(v)),
        Err(_) => (None, None),
    };
    Ok(EvaluationReport {
        total_mse: map_total(&mse),
        mse_map: mse,
        bias_sq_map,
        variance_map,
        ratios: Vec::new(),
        frames: recons.len(),
        provenance: recons.provenance,
    })
}

/// Squared bias of the ensemble mean and population variance, per pixel.
pub fn bias_variance(recons: &ReconstructionEnsemble, truth: &Transmittance) -> Result<(Array2<f64>, Array2<f64>)> {
    check_dims(recons, truth)?;
    if recons.len() < 2 {
        return Err(Error::InvalidArgument("bias/variance needs at least two frames".into()));
    }
    let mean = frame_mean(recons, |v, _| v);
    let var = frame_mean(recons, |v, p| (v - mean[p]).powi(2));
    let bias_sq = Array2::from_shape_fn(mean.dim(), |p| (mean[p] - truth.0[p]).powi(2));
    Ok((bias_sq, var))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRatio {
    pub kind: VarianceKind,
    pub units: Units,
    pub bound_total: f64,
    /// `total_mse / bound_total`; 0 for zero MSE, `+∞` for a zero bound.
    pub ratio: f64,
}

fn ratio(mse: f64, bound: f64) -> f64 {
    if mse == 0.0 {
        0.0
    } else if bound == 0.0 {
        f64::INFINITY
    } else {
        mse / bound
    }
}

/// Total-MSE to total-bound ratios, one per map. Also stored on the report.
pub fn compare_bounds(report: &mut EvaluationReport, bounds: &[VarianceMap]) -> Result<Vec<BoundRatio>> {
    let mut out = Vec::with_capacity(bounds.len());
    for b in bounds {
        if b.values.dim() != report.mse_map.dim() {
            return Err(Error::dims(format!("{:?}", report.mse_map.dim()), format!("{:?}", b.values.dim())));
        }
        out.push(BoundRatio {
            kind: b.kind,
            units: b.units,
            bound_total: b.total,
            ratio: ratio(report.total_mse, b.total),
        });
    }
    report.ratios = out.clone();
    Ok(out)
}

/// Per-pixel `MSE / bound`.
pub fn ratio_map(report: &EvaluationReport, bound: &VarianceMap) -> Result<Array2<f64>> {
    if bound.values.dim() != report.mse_map.dim() {
        return Err(Error::dims(format!("{:?}", report.mse_map.dim()), format!("{:?}", bound.values.dim())));
    }
    Ok(Array2::from_shape_fn(report.mse_map.dim(), |p| ratio(report.mse_map[p], bound.values[p])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl GaussianFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (-0.5 * ((x - self.mean) / self.sigma).powi(2)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityDiagnostic {
    pub pixel: (usize, usize),
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub fit: GaussianFit,
    /// `√(Σ residual² / Σ count²)` of the least-squares fit to bin counts; 0 when degenerate.
    pub residual: f64,
    /// All values equal: one occupied bin and zero width.
    pub degenerate: bool,
}

/// Histogram of one pixel across the ensemble with a least-squares Gaussian fit.
pub fn pixel_histogram(recons: &ReconstructionEnsemble, pixel: (usize, usize), bins: usize) -> Result<NormalityDiagnostic> {
    let (n, h, w) = recons.images.dim();
    if pixel.0 >= h || pixel.1 >= w {
        return Err(Error::InvalidArgument(format!("pixel {pixel:?} outside {h}x{w}")));
    }
    if bins == 0 || n == 0 {
        return Err(Error::InvalidArgument("histogram needs bins and frames".into()));
    }
    let values: Vec<f64> = recons.images.index_axis(Axis(1), pixel.0).index_axis(Axis(1), pixel.1).to_vec();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = pairwise_sum(&values) / n as f64;
    if hi <= lo {
        return Ok(NormalityDiagnostic {
            pixel,
            edges: vec![lo, lo],
            counts: vec![n],
            fit: GaussianFit { amplitude: n as f64, mean, sigma: 0.0 },
            residual: 0.0,
            degenerate: true,
        });
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in &values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let centres: Vec<f64> = (0..bins).map(|i| lo + width * (i as f64 + 0.5)).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sigma0 = var.sqrt().max(width / 4.0);
    let start = GaussianFit { amplitude: n as f64 * width / (sigma0 * (2.0 * std::f64::consts::PI).sqrt()), mean, sigma: sigma0 };
    let fit = fit_gaussian(&centres, &ys, start);
    let ss_res: f64 = centres.iter().zip(&ys).map(|(&x, &y)| (y - fit.eval(x)).powi(2)).sum();
    let ss: f64 = ys.iter().map(|y| y * y).sum();
    Ok(NormalityDiagnostic { pixel, edges, counts, fit, residual: (ss_res / ss).sqrt(), degenerate: false })
}

/// Levenberg–Marquardt on `(A, μ, σ)` for the squared bin-count residual.
fn fit_gaussian(xs: &[f64], ys: &[f64], start: GaussianFit) -> GaussianFit {
    let cost = |g: &GaussianFit| -> f64 { xs.iter().zip(ys).map(|(&x, &y)| (y - g.eval(x)).powi(2)).sum() };
    let mut g = start;
    let mut c = cost(&g);
    let mut mu = 1e-3;
    for _ in 0..200 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (&x, &y) in xs.iter().zip(ys) {
            let z = (x - g.mean) / g.sigma;
            let e = (-0.5 * z * z).exp();
            let j = Vector3::new(e, g.amplitude * e * z / g.sigma, g.amplitude * e * z * z / g.sigma);
            jtj += j * j.transpose();
            jtr += j * (y - g.amplitude * e);
        }
        let mut improved = false;
        while mu < 1e12 {
            let mut a = jtj;
            for i in 0..3 {
                a[(i, i)] *= 1.0 + mu;
            }
            let Some(step) = a.lu().solve(&jtr) else { break };
            let trial = GaussianFit { amplitude: g.amplitude + step[0], mean: g.mean + step[1], sigma: (g.sigma + step[2]).abs() };
            let tc = cost(&trial);
            if tc.is_finite() && tc < c && trial.sigma > 0.0 {
                let rel = (c - tc) / c.max(f64::MIN_POSITIVE);
                g = trial;
                c = tc;
                mu = (mu / 3.0).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    g
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over every fully contained `window × window` uniform window,
/// dynamic range 1 and population moments within each window.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, window: usize) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dims(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("window {window} must be odd")));
    }
    let (h, w) = a.dim();
    if window > h || window > w {
        return Err(Error::InvalidArgument(format!("window {window} larger than {h}x{w} image")));
    }
    let m = (window * window) as f64;
    let mut vals = Vec::with_capacity((h - window + 1) * (w - window + 1));
    for r in 0..=h - window {
        for c in 0..=w - window {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + window {
                for j in c..c + window {
                    let (x, y) = (a[(i, j)], b[(i, j)]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / m, sb / m);
            let va = (saa / m - ma * ma).max(0.0);
            let vb = (sbb / m - mb * mb).max(0.0);
            let cov = sab / m - ma * mb;
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            vals.push(s);
        }
    }
    Ok(pairwise_sum(&vals) / vals.len() as f64)
}

/// Mean squared difference of forward gradients, horizontal and vertical pooled.
pub fn gdl(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dims(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let (h, w) = a.dim();
    let mut terms = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                terms.push(((a[(r, c + 1)] - a[(r, c)]) - (b[(r, c + 1)] - b[(r, c)])).powi(2));
            }
            if r + 1 < h {
                terms.push(((a[(r + 1, c)] - a[(r, c)]) - (b[(r + 1, c)] - b[(r, c)])).powi(2));
            }
        }
    }
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub mse: f64,
    pub qcrb_j: Option<f64>,
    pub qcrb_mc: Option<f64>,
    /// Transmittance units.
    pub sql: Option<f64>,
    pub hl: Option<f64>,
    /// Detected-count units, `Σ 1/λ` and `Σ 1/λ²`.
    pub sql_counts: Option<f64>,
    pub hl_counts: Option<f64>,
    pub bias_sq: Option<f64>,
    pub variance: Option<f64>,
}

/// Serialised summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonReport {
    pub truth_family: Option<String>,
    pub theta: Option<Vec<f64>>,
    pub n_bar: f64,
    pub convention: String,
    pub estimator: String,
    pub frames: usize,
    pub totals: Totals,
    /// `mse/<bound>` keyed as `qcrb_j`, `sql`, `sql_counts`, ...
    pub ratios: BTreeMap<String, f64>,
    pub units: BTreeMap<String, String>,
    /// Map name to CSV file name.
    pub maps: BTreeMap<String, String>,
    pub failures: usize,
    pub clip_fraction: f64,
}

impl JsonReport {
    /// Fills totals and ratios from an evaluated report and its bound maps.
    pub fn from_report(report: &EvaluationReport, bounds: &[VarianceMap]) -> Self {
        let mut totals = Totals {
            mse: report.total_mse,
            bias_sq: report.total_bias_sq(),
            variance: report.total_variance(),
            ..Totals::default()
        };
        let mut ratios = BTreeMap::new();
        let mut units = BTreeMap::new();
        for b in bounds {
            let key = bound_key(b.kind, b.units);
            let slot = match key.as_str() {
                "qcrb_j" => &mut totals.qcrb_j,
                "qcrb_mc" => &mut totals.qcrb_mc,
                "sql" => &mut totals.sql,
                "hl" => &mut totals.hl,
                "sql_counts" => &mut totals.sql_counts,
                _ => &mut totals.hl_counts,
            };
            *slot = Some(b.total);
            ratios.insert(key.clone(), ratio(report.total_mse, b.total));
            units.insert(key, units_label(b.units).into());
        }
        Self {
            truth_family: None,
            theta: None,
            n_bar: f64::NAN,
            convention: String::new(),
            estimator: report.provenance.to_string(),
            frames: report.frames,
            totals,
            ratios,
            units,
            maps: BTreeMap::new(),
            failures: 0,
            clip_fraction: 0.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn bound_key(kind: VarianceKind, units: Units) -> String {
    match (kind, units) {
        (VarianceKind::Sql | VarianceKind::Hl, Units::Counts) => format!("{kind}_counts"),
        _ => kind.to_string(),
    }
}

fn units_label(u: Units) -> &'static str {
    match u {
        Units::Transmittance => "transmittance^2",
        Units::Counts => "relative counts",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ensemble(images: Array3<f64>) -> ReconstructionEnsemble {
        ReconstructionEnsemble { images, provenance: EstimatorKind::External, clip_fraction: 0.0, failures: vec![], fits: None }
    }

    #[test]
    fn perfect_reconstruction_has_zero_mse() {
        let t = Transmittance(Array2::from_shape_fn((4, 4), |(r, c)| (r + c) as f64 / 8.0));
        let imgs = Array3::from_shape_fn((3, 4, 4), |(_, r, c)| t.0[(r, c)]);
        let rep = mse_map(&ensemble(imgs), &t).unwrap();
        assert!(rep.mse_map.iter().all(|&v| v == 0.0));
        assert_eq!(rep.total_mse, 0.0);
        assert!(rep.variance_map.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_offset() {
        let t = Transmittance::constant(4, 0.3);
        let imgs = Array3::from_elem((5, 4, 4), 0.4);
        let rep = mse_map(&ensemble(imgs), &t).unwrap();
        for &v in rep.mse_map.iter() {
            assert!((v - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let t = Transmittance::constant(4, 0.3);
        assert!(mse_map(&ensemble(Array3::zeros((2, 3, 3))), &t).is_err());
    }

    #[test]
    fn single_frame_has_no_variance() {
        let t = Transmittance::constant(2, 0.3);
        let e = ensemble(Array3::zeros((1, 2, 2)));
        assert!(bias_variance(&e, &t).is_err());
        assert!(mse_map(&e, &t).unwrap().variance_map.is_none());
    }

    #[test]
    fn ratios() {
        let t = Transmittance::constant(2, 0.0);
        let mut rep = mse_map(&ensemble(Array3::from_elem((2, 2, 2), 0.5)), &t).unwrap();
        let same = VarianceMap {
            values: rep.mse_map.clone(),
            kind: VarianceKind::QcrbJacobian,
            units: Units::Transmittance,
            total: rep.total_mse,
            excluded: 0,
            jitter: None,
        };
        assert_eq!(compare_bounds(&mut rep, &[same.clone()]).unwrap()[0].ratio, 1.0);
        let mut zero = mse_map(&ensemble(Array3::zeros((2, 2, 2))), &t).unwrap();
        assert_eq!(compare_bounds(&mut zero, &[same]).unwrap()[0].ratio, 0.0);
    }

    #[test]
    fn constant_histogram_is_degenerate() {
        let d = pixel_histogram(&ensemble(Array3::from_elem((7, 2, 2), 0.25)), (1, 1), 10).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.counts, vec![7]);
        assert_eq!(d.fit.sigma, 0.0);
        assert!(pixel_histogram(&ensemble(Array3::zeros((1, 2, 2))), (2, 0), 10).is_err());
    }

    #[test]
    fn gaussian_fit_recovers_exact_profile() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let truth = GaussianFit { amplitude: 40.0, mean: 1.3, sigma: 0.4 };
        let ys: Vec<f64> = xs.iter().map(|&x| truth.eval(x)).collect();
        let fit = fit_gaussian(&xs, &ys, GaussianFit { amplitude: 30.0, mean: 1.0, sigma: 0.6 });
        assert!((fit.mean - 1.3).abs() < 1e-8 && (fit.sigma - 0.4).abs() < 1e-8 && (fit.amplitude - 40.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_and_gdl_basics() {
        let a = Array2::from_shape_fn((16, 16), |(r, c)| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        let b = Array2::from_shape_fn((16, 16), |(r, c)| ((r * 5 + c) % 13) as f64 / 12.0);
        assert!((ssim(&a, &a, 11).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, 11).unwrap(), ssim(&b, &a, 11).unwrap());
        assert_eq!(gdl(&a, &a).unwrap(), 0.0);
        assert!(gdl(&a, &a.mapv(|v| v + 0.2)).unwrap() < 1e-28);
        assert!(ssim(&a, &b, 17).is_err());
        assert!(ssim(&a, &b, 4).is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }
}
