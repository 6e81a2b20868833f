//! Adversarial regression training that visualizes how an image would
//! change at a different regression target value.
//!
//! The crate covers the whole pipeline: a synthetic-squares benchmark with
//! analytic ground-truth effect maps (`toydata`), preprocessing and
//! registration-based ground truth for longitudinal image pairs
//! (`xraydata`), conditional generator / adversarial regressor / critic
//! architectures (`models`), the alternating adversarial-regression
//! training loop (`train`), the WGAN-GP classification baseline
//! (`baseline`), normalized-cross-correlation evaluation (`eval`) and a
//! reproducible command-line front end (`cli`).

pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod models;
pub mod nn;
pub mod raster;
pub mod toydata;
pub mod train;
pub mod xraydata;

pub use error::{Error, Result};
pub use raster::ImageRaster;
