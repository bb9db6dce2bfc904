//! A small anchor-free detector built around three mechanisms: receptive-field
//! adaptive selection blocks in the backbone, region-routed foreground
//! attention, and a box loss that mixes CIoU with a normalized Wasserstein
//! distance between Gaussian box models.
//!
//! Everything runs on [`rfw_tensor`]; all image tensors are NCHW.

pub mod boxloss;
pub mod checks;
pub mod data;
pub mod detector;
mod error;
pub mod eval;
pub mod fbsm;
pub mod layers;
pub mod rfas;

pub use error::{Error, Result};
pub use rfw_tensor as tensor;
