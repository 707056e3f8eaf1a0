use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{PointMap, SE3Pose, ValidMask};
use crate::gsmap::mean_masked_distance;

/// Distance from the first camera to the object center after normalization.
pub const OBJECT_DISTANCE: f64 = 2.0;

/// Re-expresses all poses relative to the first one, so `out[0]` is the identity.
pub fn to_reference_frame(poses: &[SE3Pose]) -> Vec<SE3Pose> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let inv = first.inverse();
    let mut out: Vec<SE3Pose> = poses.iter().map(|p| inv.compose(p)).collect();
    out[0] = SE3Pose::identity();
    out
}

/// Object-centric normalization: scale so the first camera sits at distance 2
/// from `center`, then move into the first camera's frame.
///
/// Returns the normalized poses and the scale factor. A point `x` of the
/// original scene maps to `inverse(P1') * (scale * x)`; see [`object_point`].
pub fn normalize_cameras_object(poses: &[SE3Pose], center: &Vector3<f64>) -> Result<(Vec<SE3Pose>, f64)> {
    let first = poses
        .first()
        .ok_or_else(|| Error::InvalidArgument("no cameras to normalize".into()))?;
    let dist = (first.translation - center).norm();
    if !(dist > 1e-12) {
        return Err(Error::Degenerate(
            "first camera coincides with the object center".into(),
        ));
    }
    let scale = OBJECT_DISTANCE / dist;
    let scaled: Vec<SE3Pose> = poses.iter().map(|p| p.scaled(scale)).collect();
    Ok((to_reference_frame(&scaled), scale))
}

/// Where an original-frame point lands after [`normalize_cameras_object`].
pub fn object_point(first_pose: &SE3Pose, scale: f64, x: &Vector3<f64>) -> Vector3<f64> {
    first_pose.scaled(scale).to_camera(&(x * scale))
}

/// Scene normalization: move into the first camera's frame, then scale by
/// `s = 1/d` where `d` is the masked mean distance of the (moved) points.
///
/// Points and depths are rescaled by the caller; only the poses and `s`
/// are returned.
pub fn normalize_cameras_scene(
    poses: &[SE3Pose],
    points: &[PointMap],
    masks: &[ValidMask],
) -> Result<(Vec<SE3Pose>, f64)> {
    let first = poses
        .first()
        .ok_or_else(|| Error::InvalidArgument("no cameras to normalize".into()))?;
    let inv = first.inverse();
    let moved: Vec<PointMap> = points
        .iter()
        .map(|m| m.map(|x| inv.transform_point(x)))
        .collect();
    let d = mean_masked_distance(&moved, masks)?;
    if !(d > 0.0) {
        return Err(Error::Degenerate("all valid points sit at the first camera".into()));
    }
    let s = 1.0 / d;
    let out = to_reference_frame(poses)
        .into_iter()
        .map(|p| p.scaled(s))
        .collect();
    Ok((out, s))
}
