//! Range-conditioned dilated (RCD) convolution over LiDAR range images.
//!
//! The crate provides, bottom up: a minimal dense-tensor substrate with
//! hand-written gradients, range-image construction from raw pointclouds
//! (including Hough self-calibration of per-laser geometry), the RCD block
//! itself (pattern transformer, bilinear sampler, soft range gating, and
//! pointwise-convolution assembly), rotated 3D box geometry, the two-stage
//! detection losses, a desk-scale trainable mini-detector on synthetic
//! scenes, and AP/APH evaluation with range-bucketed reporting.

pub mod boxgeom;
pub mod detector;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod parallel;
pub mod rangeimage;
pub mod rcd;

pub use error::{Error, Result};
pub use numerics::{Param, Tensor};
