use ndarray::Array2;

use crate::error::{Error, Result};
use crate::models::Transmittance;
use crate::probe::{Frame, ProbeConfig};

/// Per-pixel inversion of the expected-count map, clipped to [0, 1]:
/// `T̂ = k side² / (N̄ |α|²)` or its square root under the amplitude-squared
/// convention. Unilluminated pixels estimate 0.
pub fn plugin_estimate(frame: &Frame, probe: &ProbeConfig) -> Result<Transmittance> {
    plugin_from_counts(&frame.to_f64(), probe)
}

pub(crate) fn plugin_from_counts(counts: &Array2<f64>, probe: &ProbeConfig) -> Result<Transmittance> {
    if counts.dim() != probe.grid.shape() {
        return Err(Error::dims(format!("{:?}", probe.grid.shape()), format!("{:?}", counts.dim())));
    }
    let scale = probe.pixel_scale();
    let conv = probe.convention;
    let mut out = Array2::zeros(counts.dim());
    ndarray::Zip::from(&mut out).and(counts).and(&scale).for_each(|t, &k, &c| {
        *t = if c > 0.0 { conv.g_inv(k / c).clamp(0.0, 1.0) } else { 0.0 };
    });
    Ok(Transmittance(out))
}
