//! Overlapping chromosome segmentation with a nested U-shape generator trained
//! against a patch-level conditional discriminator.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`data`] loads the corpus, pads and normalizes samples, and produces
//!   deterministic splits and batches.
//! * [`generator`] and [`discriminator`] build the two networks on top of the
//!   small layer toolkit in [`nn`].
//! * [`losses`] holds the Lovász-Softmax surrogate, the least-squares
//!   adversarial objectives and the baseline segmentation losses.
//! * [`metrics`] computes confusion matrices, the ratio metrics and the exact
//!   Hausdorff distance, and aggregates reports.
//! * [`train`] runs alternating optimization with early stopping and
//!   checkpointing.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
mod error;
mod fused;
pub mod generator;
mod im2col;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

/// Number of label classes: background, first chromosome, second chromosome, overlap.
pub const NUM_CLASSES: usize = 4;
/// Raw image height.
pub const RAW_HEIGHT: usize = 94;
/// Raw image width.
pub const RAW_WIDTH: usize = 93;
/// Side of the padded square canvas fed to the networks.
pub const CANVAS: usize = 128;
