//! Point-cloud instance segmentation driven by Gaussian instance-center
//! heatmaps.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod groundtruth;
pub mod inference;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};
