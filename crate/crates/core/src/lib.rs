//! Numerics and a toy end-to-end pipeline for a two-stage object detector
//! whose first stage emits an IoU-aware object prior, whose final scores
//! fuse that prior with the second-stage class score, and whose second
//! stage is trained with prior-driven boosting reweighting.
//!
//! Geometry, losses, scoring, and evaluation are generic over [`Scalar`]
//! (`f32`/`f64`); the aliases below fix the double-precision types used for
//! training.

pub mod anchors;
pub mod boxes;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod losses;
pub mod numcore;
pub mod postprocess;
pub mod reweighting;
pub mod scalar;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Box64 = boxes::BBox<f64>;
pub type Box32 = boxes::BBox<f32>;
pub type Delta64 = boxes::Delta<f64>;
pub type Grid64 = numcore::Grid<f64>;
pub type Detection64 = postprocess::Detection<f64>;
pub type Detector64 = detector::Detector<f64>;
