//! Direct optimization of per-frame depth and pose.

mod activation;
mod adam;
mod fit;
mod multiscale;

pub use activation::{sigmoid_to_depth, DepthActivation};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use fit::{fit_depth, triplet_guidance, EpochRecord, FitConfig, FitResult, FitTriplet, Init, TRUNK_CHANNELS};
pub use multiscale::{check_pyramid, level_size, multiscale_photometric, multiscale_photometric_node, reprojection_error_node};
