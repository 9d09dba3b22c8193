use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square pixel lattice centred on the origin.
///
/// Pixel `(row, col)` sits at `x = col - side/2`, `y = row - side/2`, so pixel
/// `(0, 0)` is at `(-side/2, -side/2)`. Each pixel carries quadrature weight
/// `1/side²`, which makes the image area integrate to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    side: usize,
}

impl GridSpec {
    pub const DEFAULT_SIDE: usize = 64;

    pub fn new(side: usize) -> Result<Self> {
        if side < 2 || side % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "grid side must be a positive even integer >= 2, got {side}"
            )));
        }
        Ok(Self { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_pix(&self) -> usize {
        self.side * self.side
    }

    pub fn pixel_weight(&self) -> f64 {
        1.0 / self.n_pix() as f64
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.side, self.side)
    }

    /// Lattice coordinate of a row or column index.
    #[inline]
    pub fn coord(&self, index: usize) -> f64 {
        index as f64 - (self.side / 2) as f64
    }

    /// `(x, y)` of pixel `(row, col)`.
    #[inline]
    pub fn xy(&self, row: usize, col: usize) -> (f64, f64) {
        (self.coord(col), self.coord(row))
    }

    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.side).map(|i| self.coord(i))
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { side: Self::DEFAULT_SIDE }
    }
}

/// Shorthand for [`GridSpec::new`].
pub fn make_grid(side: usize) -> Result<GridSpec> {
    GridSpec::new(side)
}
