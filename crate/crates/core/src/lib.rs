//! Quantum-limited imaging of parametric transmittance masks.
//!
//! [`models`] renders parameterised images, [`probe`] samples photon-count
//! frames from them, [`bounds`] computes per-pixel precision limits,
//! [`estimators`] reconstructs images from frames and [`evaluation`] compares
//! the empirical error of an estimator against the limits.

pub mod bounds;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod imgx;
pub mod models;
pub mod probe;
pub mod seed;
pub mod table;

pub use error::{Error, Result};
