//! Pose-free sparse-view Gaussian reconstruction at desk scale.
//!
//! A small transformer predicts one pixel-aligned Gaussian per input pixel,
//! all expressed in the first view's camera frame. Camera focal length and
//! poses are then recovered from the predicted positions with a Weiszfeld
//! focal solver and PnP-RANSAC, and the Gaussians are rendered with a
//! software splatting rasterizer.

pub mod calib;
pub mod error;
pub mod geometry;
pub mod gsmap;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod renderer;
pub mod synth;

pub use error::{Error, Result};
pub use synth::Mode;
