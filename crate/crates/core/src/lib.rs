//! A deterministic, single-process federated learning laboratory for
//! out-of-distribution generalisation under attribute skew.
//!
//! Local training combines three terms: cross-entropy on the client's own
//! images, a classification loss on features blended with randomly paired
//! background features (background intervention), and a KL pull of local
//! features toward the frozen global encoder (global distillation). The
//! server aggregates with FedAvg.

pub mod container;
pub mod datagen;
pub mod distillation;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcam;
pub mod intervention;
pub mod loss;
pub mod model;
pub mod projection;
pub mod raster;
pub mod rundir;
pub mod seed;
pub mod stats;
pub mod storage;

pub use error::{Error, Result};
