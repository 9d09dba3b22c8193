//! Starting values for the likelihood fit from the discrete Fourier transform of a frame.
//!
//! Linear components come from peaks of the 2D power spectrum of the
//! mean-subtracted counts, zero-padded by [`PAD`] so peaks are located on a
//! grid finer than one natural DFT bin. Radial components come from a 1D
//! periodogram of the annulus-averaged profile, about the origin for the
//! centred component and about the count centroid for an offset one.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::models::{Family, GridSpec, ParamVector};

/// Zero-padding factor of the transforms.
pub const PAD: usize = 4;
/// A peak must exceed this multiple of the median off-DC power.
pub const PEAK_TO_MEDIAN: f64 = 3.0;

struct Peak {
    omega: f64,
    beta: f64,
    psi: f64,
    power: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

fn signed_bin(k: usize, n: usize) -> f64 {
    if k > n / 2 {
        k as f64 - n as f64
    } else {
        k as f64
    }
}

/// Strongest `count` peaks of the 2D spectrum on the half plane.
fn spectrum_peaks(data: &Array2<f64>, grid: &GridSpec, count: usize) -> Result<Vec<Peak>> {
    let side = grid.side();
    let n = side * PAD;
    let mut buf = vec![Complex::new(0.0, 0.0); n * n];
    let mean = data.mean().unwrap_or(0.0);
    for ((r, c), v) in data.indexed_iter() {
        buf[r * n + c].re = v - mean;
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = buf[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            buf[r * n + c] = col[r];
        }
    }
    let power: Vec<f64> = buf.iter().map(|z| z.norm_sqr()).collect();
    let med = median(power.iter().skip(1).copied().collect());
    let mut taken: Vec<(f64, f64)> = Vec::new();
    let mut peaks = Vec::new();
    let suppress = PAD as f64;
    for _ in 0..count {
        let mut best: Option<(usize, f64)> = None;
        for u in 0..n {
            let ky = signed_bin(u, n);
            for v in 0..n {
                let kx = signed_bin(v, n);
                if (u == 0 && v == 0) || ky < 0.0 || (ky == 0.0 && kx <= 0.0) {
                    continue;
                }
                if taken.iter().any(|&(ty, tx)| (ty - ky).hypot(tx - kx) < suppress) {
                    continue;
                }
                let p = power[u * n + v];
                if best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((u * n + v, p));
                }
            }
        }
        let Some((idx, p)) = best else { break };
        if !(p > PEAK_TO_MEDIAN * med) {
            return Err(Error::InitFailed(format!(
                "no spectral peak above {PEAK_TO_MEDIAN}x the median power"
            )));
        }
        let (ky, kx) = (signed_bin(idx / n, n), signed_bin(idx % n, n));
        taken.push((ky, kx));
        let (wy, wx) = (2.0 * PI * ky / n as f64, 2.0 * PI * kx / n as f64);
        // move the phase reference from pixel (0, 0) to the lattice origin
        let shift = (wx + wy) * (side / 2) as f64;
        let z = buf[idx] * Complex::from_polar(1.0, shift);
        peaks.push(Peak { omega: wx.hypot(wy), beta: wy.atan2(wx), psi: z.arg() + 0.5 * PI, power: p });
    }
    if peaks.len() < count {
        return Err(Error::InitFailed("not enough spectral peaks".into()));
    }
    Ok(peaks)
}

/// Annulus-averaged profile about `(cx, cy)` and its dominant frequency and phase.
fn radial_peak(data: &Array2<f64>, grid: &GridSpec, cx: f64, cy: f64) -> Result<Peak> {
    let side = grid.side();
    let max_r = ((side as f64) * std::f64::consts::SQRT_2).ceil() as usize + 1;
    let mut sum = vec![0.0; max_r];
    let mut cnt = vec![0usize; max_r];
    for ((r, c), v) in data.indexed_iter() {
        let (x, y) = grid.xy(r, c);
        let bin = (x - cx).hypot(y - cy).round() as usize;
        if bin < max_r {
            sum[bin] += v;
            cnt[bin] += 1;
        }
    }
    let profile: Vec<f64> =
        sum.iter().zip(&cnt).filter(|(_, &c)| c > 0).map(|(s, &c)| s / c as f64).collect();
    let mean = profile.iter().sum::<f64>() / profile.len().max(1) as f64;
    let n = profile.len() * PAD;
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (b, p) in buf.iter_mut().zip(&profile) {
        b.re = p - mean;
    }
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power: Vec<f64> = buf.iter().map(|z| z.norm_sqr()).collect();
    let med = median(power[1..n / 2].to_vec());
    let (m, p) = power[1..n / 2]
        .iter()
        .enumerate()
        .map(|(i, &p)| (i + 1, p))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::InitFailed("radial profile too short".into()))?;
    if !(p > PEAK_TO_MEDIAN * med) {
        return Err(Error::InitFailed("no radial peak above the median power".into()));
    }
    Ok(Peak {
        omega: 2.0 * PI * m as f64 / n as f64,
        beta: 0.0,
        psi: buf[m].arg() + 0.5 * PI,
        power: p,
    })
}

fn centroid(data: &Array2<f64>, grid: &GridSpec) -> (f64, f64) {
    let mean = data.mean().unwrap_or(0.0);
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for ((r, c), v) in data.indexed_iter() {
        let w = (v - mean).abs();
        let (x, y) = grid.xy(r, c);
        sx += w * x;
        sy += w * y;
        sw += w;
    }
    if sw > 0.0 {
        (sx / sw, sy / sw)
    } else {
        (0.0, 0.0)
    }
}

fn linear_triplet(p: &Peak) -> [f64; 3] {
    [p.omega, p.beta, p.psi / p.omega]
}

/// Initial parameters estimated from a count image.
pub fn spectral_init(counts: &Array2<f64>, family: Family, grid: &GridSpec) -> Result<ParamVector> {
    if counts.dim() != grid.shape() {
        return Err(Error::dims(format!("{:?}", grid.shape()), format!("{:?}", counts.dim())));
    }
    let values = match family {
        Family::SingleLinear | Family::DoubleLinear | Family::TripleLinear => {
            let n = family.n_free_amplitudes() + 1;
            let peaks = spectrum_peaks(counts, grid, n)?;
            let amps: Vec<f64> = peaks.iter().map(|p| p.power.sqrt()).collect();
            let total: f64 = amps.iter().sum();
            let mut v: Vec<f64> = amps[..n - 1].iter().map(|a| a / total).collect();
            for p in &peaks {
                v.extend(linear_triplet(p));
            }
            v
        }
        Family::RadialLinear => {
            let r = radial_peak(counts, grid, 0.0, 0.0)?;
            let l = spectrum_peaks(counts, grid, 1)?;
            let [w, b, phi] = linear_triplet(&l[0]);
            vec![0.5, r.omega, r.psi, w, b, phi]
        }
        Family::DoubleRadial => {
            let r1 = radial_peak(counts, grid, 0.0, 0.0)?;
            let (cx, cy) = centroid(counts, grid);
            let r2 = radial_peak(counts, grid, cx, cy)?;
            vec![0.5, r1.omega, r1.psi, r2.omega, r2.psi, cx, cy]
        }
    };
    ParamVector::new(family, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{render, sample_params, ParamBounds};
    use crate::probe::{expected_counts, Convention, ProbeConfig};

    #[test]
    fn constant_image_fails() {
        let g = GridSpec::new(16).unwrap();
        let counts = Array2::from_elem((16, 16), 3.0);
        for family in Family::ALL {
            assert!(matches!(spectral_init(&counts, family, &g), Err(Error::InitFailed(_))));
        }
    }

    #[test]
    fn single_linear_within_one_bin() {
        // the DFT bin of the unpadded transform is 2π/side; angles within one
        // angular bin at the recovered radius
        let g = GridSpec::new(64).unwrap();
        let probe = ProbeConfig::uniform(4096.0, Convention::AmplitudeSquared, g).unwrap();
        let bounds = ParamBounds::standard(Family::SingleLinear, 64);
        let bin = 2.0 * PI / 64.0;
        for seed in 0..20 {
            let theta = sample_params(Family::SingleLinear, &bounds, seed).unwrap().canonical();
            let lam = expected_counts(&render(&theta, &g), &probe).unwrap();
            let init = spectral_init(&lam.0, Family::SingleLinear, &g).unwrap().canonical();
            let (w, b) = (theta.values[0], theta.values[1]);
            assert!((init.values[0] - w).abs() <= bin, "seed {seed}: ω {} vs {w}", init.values[0]);
            let db = crate::models::wrap_centered(init.values[1] - b, PI).abs();
            let ang_bin = (bin / w.max(bin)).min(PI / 2.0).max(PI / 8.0);
            assert!(db <= ang_bin, "seed {seed}: β {} vs {b}", init.values[1]);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let g = GridSpec::new(32).unwrap();
        let theta = sample_params(Family::DoubleRadial, &ParamBounds::standard(Family::DoubleRadial, 32), 4).unwrap();
        let counts = render(&theta, &g).0.mapv(|t| 10.0 * t * t);
        let a = spectral_init(&counts, Family::DoubleRadial, &g);
        let b = spectral_init(&counts, Family::DoubleRadial, &g);
        assert_eq!(a.ok(), b.ok());
    }
}
