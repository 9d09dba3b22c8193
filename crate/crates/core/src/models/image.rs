use ndarray::Array2;

/// Sinusoid sum before normalisation, values in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage(pub Array2<f64>);

/// Per-pixel transmittance in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Transmittance(pub Array2<f64>);

impl Transmittance {
    pub fn side(&self) -> usize {
        self.0.nrows()
    }

    pub fn constant(side: usize, value: f64) -> Self {
        Self(Array2::from_elem((side, side), value))
    }
}
