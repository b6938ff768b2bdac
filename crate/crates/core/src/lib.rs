//! Scale-aware tooling for training and evaluating object detectors without
//! small-instance annotations.
//!
//! The crate covers box geometry, COCO-shaped data I/O, the pixel operations
//! used for rescaling and blurring, dataset synthesis, a pluggable detector
//! boundary, two-pass upscaled inference and COCO-style evaluation.

pub mod cli;
pub mod cocodata;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod raster;
pub mod transforms;

mod fsutil;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
