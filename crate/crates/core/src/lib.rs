//! Desk-scale cascaded multitask MRI-to-synthetic-CT pipeline.
//!
//! The crate is organized around a single axis convention stated once in
//! [`volume`]: x varies fastest, then y, then z. Everything else (patch
//! tiling, scan orders, the file format) is bound to it.
//!
//! Pipeline, end to end: [`phantom`] generates paired pseudo-MRI/CT cohorts
//! with a skull-like bone shell; [`patching`] tiles and samples 3D patches;
//! [`model`] is a 3D encoder-decoder with a selective state-space (or
//! Transformer) bottleneck built on the [`tape`] reverse-mode engine;
//! [`losses`] is the composite Dice + BCE + region-restricted MSE objective;
//! [`training`] runs the single-task/multitask loops, transfer fine-tuning,
//! sliding-window synthesis and evaluation; [`metrics`] and [`stats`] score
//! the results and compare variants with paired tests.

pub mod losses;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod patching;
pub mod phantom;
pub mod seed;
pub mod stats;
pub mod tape;
pub mod training;
pub mod volume;
