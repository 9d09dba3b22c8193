//! Parameterised image families, the pixel lattice and raster ingestion.

mod family;
mod grid;
mod image;
mod raster;

pub use family::{
    analytic_jacobian, eval_raw, eval_with_jacobian, sample_params, to_transmittance,
    wrap_centered, Family, JacobianStack, ParamBounds, ParamKind, ParamVector,
};
pub(crate) use family::{render_transmittance_into, sample_params_with};
pub use grid::{make_grid, GridSpec};
pub use image::{RawImage, Transmittance};
pub use raster::{load_raster, write_pgm, write_raster};

/// Renders the transmittance `(1 + f)/2` for `theta`.
pub fn render(theta: &ParamVector, grid: &GridSpec) -> Transmittance {
    let mut out = vec![0.0; grid.n_pix()];
    render_transmittance_into(theta, grid, &mut out);
    Transmittance(ndarray::Array2::from_shape_vec(grid.shape(), out).expect("shape"))
}
