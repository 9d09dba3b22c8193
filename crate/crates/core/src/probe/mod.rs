//! Coherent-probe measurement model: expected photon counts per pixel and
//! Poisson-sampled frames.

pub mod poisson;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgx::{self, Dtype, Header, ImgxData};
use crate::models::{GridSpec, JacobianStack, Transmittance};
use crate::seed::{derived_seed, rng_for};

/// How detected intensity depends on transmittance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Convention {
    /// λ ∝ T.
    IntensityLinear,
    /// λ ∝ T² (T is an amplitude transmittance).
    #[default]
    AmplitudeSquared,
}

impl Convention {
    pub fn as_str(self) -> &'static str {
        match self {
            Convention::IntensityLinear => "intensity_linear",
            Convention::AmplitudeSquared => "amplitude_squared",
        }
    }

    #[inline]
    pub(crate) fn g(self, t: f64) -> f64 {
        match self {
            Convention::IntensityLinear => t,
            Convention::AmplitudeSquared => t * t,
        }
    }

    #[inline]
    pub(crate) fn dg(self, t: f64) -> f64 {
        match self {
            Convention::IntensityLinear => 1.0,
            Convention::AmplitudeSquared => 2.0 * t,
        }
    }

    /// Inverse of `g`, for per-pixel inversion of counts.
    #[inline]
    pub(crate) fn g_inv(self, v: f64) -> f64 {
        match self {
            Convention::IntensityLinear => v,
            Convention::AmplitudeSquared => v.max(0.0).sqrt(),
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "intensity_linear" | "intensitylinear" | "linear" => Ok(Convention::IntensityLinear),
            "amplitude_squared" | "amplitudesquared" | "squared" => {
                Ok(Convention::AmplitudeSquared)
            }
            _ => Err(Error::InvalidArgument(format!("unknown convention {s:?}"))),
        }
    }
}

/// Probe description: mean photon number, illumination profile |α|², detection
/// convention and grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub n_bar: f64,
    pub illumination: Array2<f64>,
    pub convention: Convention,
    pub grid: GridSpec,
}

impl ProbeConfig {
    /// Uniform illumination `|α|² ≡ 1`.
    pub fn uniform(n_bar: f64, convention: Convention, grid: GridSpec) -> Result<Self> {
        Self::new(n_bar, Array2::ones(grid.shape()), convention, grid)
    }

    pub fn new(
        n_bar: f64,
        illumination: Array2<f64>,
        convention: Convention,
        grid: GridSpec,
    ) -> Result<Self> {
        if !(n_bar > 0.0 && n_bar.is_finite()) {
            return Err(Error::InvalidArgument(format!("n_bar must be positive, got {n_bar}")));
        }
        if illumination.dim() != grid.shape() {
            return Err(Error::dims(format!("{:?}", grid.shape()), format!("{:?}", illumination.dim())));
        }
        if illumination.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return Err(Error::InvalidArgument("illumination must be non-negative".into()));
        }
        Ok(Self { n_bar, illumination, convention, grid })
    }

    /// Same probe at a different photon number.
    pub fn with_n_bar(&self, n_bar: f64) -> Result<Self> {
        Self::new(n_bar, self.illumination.clone(), self.convention, self.grid)
    }

    /// Per-pixel scale `N̄ |α|² / n_pix` (photons per pixel at unit `g(T)`).
    pub fn pixel_scale(&self) -> Array2<f64> {
        let w = self.n_bar * self.grid.pixel_weight();
        self.illumination.mapv(|a| a * w)
    }

    fn check_grid(&self, side: usize) -> Result<()> {
        if side != self.grid.side() {
            return Err(Error::dims(
                format!("{0}x{0}", self.grid.side()),
                format!("{side}x{side}"),
            ));
        }
        Ok(())
    }
}

/// Expected photon counts λ(x, y) per pixel for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedMap(pub Array2<f64>);

impl ExpectedMap {
    pub fn side(&self) -> usize {
        self.0.nrows()
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }
}

/// `λ = N̄ |α|² g(T) / side²` with `g(T) = T` or `T²`.
pub fn expected_counts(t: &Transmittance, probe: &ProbeConfig) -> Result<ExpectedMap> {
    probe.check_grid(t.side())?;
    if t.0.dim() != probe.grid.shape() {
        return Err(Error::dims(format!("{:?}", probe.grid.shape()), format!("{:?}", t.0.dim())));
    }
    let conv = probe.convention;
    let mut lam = probe.pixel_scale();
    lam.zip_mut_with(&t.0, |l, &tv| *l *= conv.g(tv));
    Ok(ExpectedMap(lam))
}

/// Expected counts together with `∂λ/∂θ` obtained from `∂T/∂θ` by the chain rule.
pub fn expected_with_jacobian(
    t: &Transmittance,
    jac: &JacobianStack,
    probe: &ProbeConfig,
) -> Result<(ExpectedMap, JacobianStack)> {
    let lam = expected_counts(t, probe)?;
    if jac.side() != probe.grid.side() {
        return Err(Error::dims(probe.grid.side(), jac.side()));
    }
    let scale = probe.pixel_scale();
    let conv = probe.convention;
    let mut dlam = jac.0.clone();
    for mut layer in dlam.outer_iter_mut() {
        ndarray::Zip::from(&mut layer).and(&t.0).and(&scale).for_each(|d, &tv, &s| {
            *d *= s * conv.dg(tv);
        });
    }
    Ok((lam, JacobianStack(dlam)))
}

/// One measurement frame of photon counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub counts: Array2<u32>,
    pub seed: u64,
}

impl Frame {
    pub fn side(&self) -> usize {
        self.counts.nrows()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.counts.mapv(f64::from)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

fn check_lambda(lam: &ExpectedMap) -> Result<()> {
    if lam.0.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("expected counts must be finite and >= 0".into()));
    }
    Ok(())
}

/// Fills `out` (row-major) with independent Poisson draws of mean λ.
pub fn sample_frame_into(lam: &ExpectedMap, seed: u64, out: &mut [u32]) {
    let mut rng = rng_for(seed);
    for (o, &l) in out.iter_mut().zip(lam.0.iter()) {
        *o = poisson::sample(&mut rng, l);
    }
}

/// Poisson frame, deterministic in `seed`.
pub fn sample_frame(lam: &ExpectedMap, seed: u64) -> Result<Frame> {
    check_lambda(lam)?;
    let mut counts = Array2::zeros(lam.0.dim());
    sample_frame_into(lam, seed, counts.as_slice_mut().expect("contiguous"));
    Ok(Frame { counts, seed })
}

/// Frames sampled from the same expected map.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEnsemble {
    pub frames: Vec<Frame>,
    pub master_seed: Option<u64>,
}

impl FrameEnsemble {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn side(&self) -> Option<usize> {
        self.frames.first().map(Frame::side)
    }

    /// Writes counts as `u32le` IMGX.
    pub fn write_imgx(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let side = self.side().unwrap_or(0);
        let mut data = Vec::with_capacity(self.len() * side * side);
        for f in &self.frames {
            data.extend(f.counts.iter().copied());
        }
        imgx::write(path, &Header::new(side, side, self.len(), Dtype::U32Le), &ImgxData::U32(data))
    }

    /// Reads a `u32le` IMGX ensemble. Per-frame seeds are not stored and read back as 0.
    pub fn read_imgx(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = imgx::read(path)?;
        let (h, w) = (file.header.height, file.header.width);
        if h != w {
            return Err(Error::Format(format!("frames must be square, got {h}x{w}")));
        }
        let ImgxData::U32(data) = file.data else {
            return Err(Error::UnsupportedDtype("f32le (frame ensembles are u32le)".into()));
        };
        let frames = data
            .chunks_exact((h * w).max(1))
            .take(file.header.frames)
            .map(|c| Frame {
                counts: Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk shape"),
                seed: 0,
            })
            .collect();
        Ok(Self { frames, master_seed: None })
    }

    /// Counts stacked as `(frames, side, side)` floats.
    pub fn to_array3(&self) -> Array3<f64> {
        let side = self.side().unwrap_or(0);
        let mut out = Array3::zeros((self.len(), side, side));
        for (mut dst, f) in out.outer_iter_mut().zip(&self.frames) {
            dst.assign(&f.counts.mapv(f64::from));
        }
        out
    }
}

/// `count` frames; frame `i` is `sample_frame(λ, derived_seed(master_seed, i))`.
pub fn sample_ensemble(lam: &ExpectedMap, count: usize, master_seed: u64) -> Result<FrameEnsemble> {
    if count == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one frame".into()));
    }
    check_lambda(lam)?;
    let frames = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = derived_seed(master_seed, i);
            let mut counts = Array2::zeros(lam.0.dim());
            sample_frame_into(lam, seed, counts.as_slice_mut().expect("contiguous"));
            Frame { counts, seed }
        })
        .collect();
    Ok(FrameEnsemble { frames, master_seed: Some(master_seed) })
}
