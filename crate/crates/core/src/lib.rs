//! Radiance fields trained with worst-case perturbations of ray coordinates,
//! intermediate features and pre-compositing outputs.
//!
//! The pipeline runs on the tape-based engine from `augnerf-autodiff`:
//! [`field`] evaluates the MLP, [`rays`] casts and samples rays, [`render`]
//! composites, [`adversary`] searches perturbations, and [`train`] fits the
//! field. [`metrics`], [`corrupt`] and [`geometry`] cover evaluation, and
//! [`scene`] loads datasets or builds analytic toy scenes.

pub mod adversary;
pub mod corrupt;
pub mod error;
pub mod field;
pub mod forward;
pub mod geometry;
mod mc_tables;
pub mod metrics;
pub mod raster;
pub mod rays;
pub mod regularize;
pub mod render;
pub mod scene;
pub mod train;
mod util;

pub use error::{Error, Result};
