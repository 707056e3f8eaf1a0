//! Camera recovery from predicted Gaussian positions.

mod focal;
mod metrics;
mod normalize;
mod pnp;

pub use focal::{
    estimate_focal_multi, estimate_focal_single, focal_objective, weiszfeld_focal, FocalEstimate,
    MAX_WEISZFELD_ITERS, MIN_FOCAL_POINTS,
};
pub use metrics::{align_centers, pairwise_rre, pose_errors, rra, PoseErrors};
pub use normalize::{
    normalize_cameras_object, normalize_cameras_scene, object_point, to_reference_frame,
    OBJECT_DISTANCE,
};
pub use pnp::{solve_pnp_ransac, PnpSolution, RansacParams, SAMPLE_SIZE};

use crate::error::{Error, Result};
use crate::geometry::{Grid, ValidMask};

pub const DEFAULT_TAU: f64 = 0.5;

/// Foreground mask from an alpha matte: `alpha > 0.5`.
pub fn build_mask_object(alpha: &Grid<f64>) -> ValidMask {
    alpha.map(|&a| a > 0.5)
}

/// Visibility mask from a per-pixel opacity map: `opacity > tau`.
pub fn build_mask_scene(opacity: &Grid<f64>, tau: f64) -> Result<ValidMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "visibility threshold must lie in (0, 1), got {tau}"
        )));
    }
    Ok(opacity.map(|&o| o > tau))
}
