//! Reconstruction of transmittance images from count frames.

mod mle;
mod plugin;
mod spectral;

use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgx::{self, ImgxData};
use crate::models::{render, Family, Transmittance};
use crate::probe::{Frame, FrameEnsemble, ProbeConfig};

pub use mle::{ml_fit, ml_fit_counts, FitResult, MlConfig};
pub use plugin::plugin_estimate;
pub use spectral::{spectral_init, PAD, PEAK_TO_MEDIAN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    PlugIn,
    MaxLikelihood { family: Family, config: MlConfig },
}

impl Estimator {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            Estimator::PlugIn => EstimatorKind::PlugIn,
            Estimator::MaxLikelihood { .. } => EstimatorKind::MaxLikelihood,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    PlugIn,
    MaxLikelihood,
    External,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::PlugIn => "plugin",
            EstimatorKind::MaxLikelihood => "mle",
            EstimatorKind::External => "external",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A frame whose fit did not converge. Its best partial estimate is kept in the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionEnsemble {
    /// `(frames, side, side)`.
    pub images: Array3<f64>,
    pub provenance: EstimatorKind,
    /// Fraction of loaded values that were clipped into [0, 1].
    pub clip_fraction: f64,
    pub failures: Vec<FrameFailure>,
    /// Per-frame fits for likelihood reconstructions, in frame order.
    pub fits: Option<Vec<FitResult>>,
}

impl ReconstructionEnsemble {
    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.images.dim().1
    }

    pub fn image(&self, i: usize) -> Array2<f64> {
        self.images.index_axis(ndarray::Axis(0), i).to_owned()
    }
}

/// Reconstructs one frame. A likelihood fit that did not converge is an error.
pub fn reconstruct(frame: &Frame, probe: &ProbeConfig, estimator: &Estimator) -> Result<Transmittance> {
    match estimator {
        Estimator::PlugIn => plugin_estimate(frame, probe),
        Estimator::MaxLikelihood { family, config } => {
            Ok(render(&ml_fit(frame, *family, probe, config)?.theta, &probe.grid))
        }
    }
}

/// Image, fit and failure message of one frame.
type Outcome = (Transmittance, Option<FitResult>, Option<String>);

fn reconstruct_one(frame: &Frame, probe: &ProbeConfig, estimator: &Estimator) -> Result<Outcome> {
    match estimator {
        Estimator::PlugIn => Ok((plugin_estimate(frame, probe)?, None, None)),
        Estimator::MaxLikelihood { family, config } => match ml_fit(frame, *family, probe, config) {
            Ok(fit) => Ok((render(&fit.theta, &probe.grid), Some(fit), None)),
            Err(Error::NonConvergence { best, best_nll }) => {
                let msg = format!("no start converged; best nll {best_nll}");
                Ok((render(&best.theta, &probe.grid), Some(*best), Some(msg)))
            }
            Err(e) => Err(e),
        },
    }
}

/// Reconstructs every frame in parallel; output order matches input order.
///
/// Frames whose likelihood fit did not converge keep their best partial
/// estimate and are listed in `failures`. Any other error aborts the run.
pub fn run_ensemble(
    frames: &FrameEnsemble,
    probe: &ProbeConfig,
    estimator: &Estimator,
) -> Result<ReconstructionEnsemble> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames to reconstruct".into()));
    }
    let side = probe.grid.side();
    let outcomes: Vec<Outcome> = frames
        .frames
        .par_iter()
        .map(|f| reconstruct_one(f, probe, estimator))
        .collect::<Result<_>>()?;
    let mut images = Array3::zeros((frames.len(), side, side));
    let mut failures = Vec::new();
    let mut fits = Vec::new();
    for (i, (t, fit, fail)) in outcomes.into_iter().enumerate() {
        images.index_axis_mut(ndarray::Axis(0), i).assign(&t.0);
        if let Some(message) = fail {
            failures.push(FrameFailure { index: i, message });
        }
        fits.extend(fit);
    }
    let fits = matches!(estimator, Estimator::MaxLikelihood { .. }).then_some(fits);
    Ok(ReconstructionEnsemble { images, provenance: estimator.kind(), clip_fraction: 0.0, failures, fits })
}

/// Reads an `f32le` IMGX stack produced elsewhere. Values outside [0, 1] are
/// clipped and the clipped fraction is recorded.
pub fn load_external_reconstructions(path: impl AsRef<Path>) -> Result<ReconstructionEnsemble> {
    let file = imgx::read(path)?;
    let (h, w, n) = (file.header.height, file.header.width, file.header.frames);
    if h != w {
        return Err(Error::Format(format!("reconstructions must be square, got {h}x{w}")));
    }
    let ImgxData::F32(data) = file.data else {
        return Err(Error::UnsupportedDtype("u32le (reconstructions are f32le)".into()));
    };
    let mut clipped = 0usize;
    let values: Vec<f64> = data
        .iter()
        .map(|&v| {
            let v = f64::from(v);
            if !(0.0..=1.0).contains(&v) {
                clipped += 1;
            }
            if v.is_nan() {
                0.0
            } else {
                v.clamp(0.0, 1.0)
            }
        })
        .collect();
    let total = values.len();
    let images = Array3::from_shape_vec((n, h, w), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(ReconstructionEnsemble {
        images,
        provenance: EstimatorKind::External,
        clip_fraction: if total > 0 { clipped as f64 / total as f64 } else { 0.0 },
        failures: Vec::new(),
        fits: None,
    })
}

/// Writes the images as an `f32le` IMGX stack.
pub fn write_ensemble(ensemble: &ReconstructionEnsemble, path: impl AsRef<Path>) -> Result<()> {
    let (n, h, w) = ensemble.images.dim();
    let data: Vec<f32> = ensemble.images.iter().map(|&v| v as f32).collect();
    imgx::write(path, &imgx::Header::new(h, w, n, imgx::Dtype::F32Le), &ImgxData::F32(data))
}
