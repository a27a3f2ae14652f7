//! Diffusion MRI harmonization between two scanners with a spherical-harmonic
//! residual network (SHResNet) and RISH projection.
//!
//! The pipeline: normalize each acquisition by its mean b0 ([`dwi`]), fit
//! order-4 SH coefficients ([`sh`]), map 3×3×3 coefficient patches through
//! the network ([`model`], built on the autodiff engine in [`nn`]), rescale
//! the prediction onto the input orientation ([`rish`]) and reconstruct the
//! target scanner's signal ([`harmonize`]). [`training`], [`evaluation`] and
//! the synthetic two-scanner generator in [`phantom`] cover the rest.

pub mod dti;
pub mod dwi;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod harmonize;
pub mod io;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod rish;
pub mod sh;
pub mod training;

pub use error::{Error, Result};
