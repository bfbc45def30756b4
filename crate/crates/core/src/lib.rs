//! Self-supervised monocular depth with semantic guidance.
//!
//! The crate provides a small reverse-mode autodiff graph over dense
//! tensors, camera geometry and inverse warping, the photometric,
//! smoothness and cross-entropy losses, dynamic-class masking, the
//! multi-task gradient junction, an optimizer that fits depth and pose
//! directly, evaluation metrics, a synthetic scene renderer and PNG/CSV I/O.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod multitask;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
