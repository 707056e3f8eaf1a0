use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_deg, SE3Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    /// Mean pairwise relative rotation error, degrees.
    pub rre: f64,
    pub rra15: f64,
    pub rra30: f64,
    /// Mean camera-center distance after similarity alignment.
    pub te: f64,
}

/// Relative rotation error of every camera pair `(a, b)`, `a < b`, in
/// lexicographic order.
pub fn pairwise_rre(pred: &[SE3Pose], gt: &[SE3Pose]) -> Vec<f64> {
    let n = pred.len().min(gt.len());
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let rel_pred = pred[a].rotation.transpose() * pred[b].rotation;
            let rel_gt = gt[a].rotation.transpose() * gt[b].rotation;
            out.push(rotation_angle_deg(&rel_pred, &rel_gt));
        }
    }
    out
}

/// Fraction of `errors` strictly below `threshold_deg`.
pub fn rra(errors: &[f64], threshold_deg: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e < threshold_deg).count() as f64 / errors.len() as f64
}

/// Maps predicted camera centers onto the ground truth with a similarity:
/// the rotation that aligns the first cameras, then the least-squares scale
/// and translation over all centers.
pub fn align_centers(pred: &[SE3Pose], gt: &[SE3Pose]) -> Vec<Vector3<f64>> {
    let g: Matrix3<f64> = gt[0].rotation * pred[0].rotation.transpose();
    let p: Vec<Vector3<f64>> = pred.iter().map(|x| g * x.center()).collect();
    let q: Vec<Vector3<f64>> = gt.iter().map(|x| x.center()).collect();
    let n = p.len() as f64;
    let pm = p.iter().sum::<Vector3<f64>>() / n;
    let qm = q.iter().sum::<Vector3<f64>>() / n;
    let den: f64 = p.iter().map(|x| (x - pm).norm_squared()).sum();
    let num: f64 = p.iter().zip(&q).map(|(x, y)| (x - pm).dot(&(y - qm))).sum();
    let s = if den > 1e-18 { num / den } else { 1.0 };
    p.iter().map(|x| (x - pm) * s + qm).collect()
}

pub fn pose_errors(pred: &[SE3Pose], gt: &[SE3Pose]) -> Result<PoseErrors> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted poses but {} ground-truth poses",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument(
            "pose errors need at least two cameras".into(),
        ));
    }
    let errs = pairwise_rre(pred, gt);
    let rre = errs.iter().sum::<f64>() / errs.len() as f64;
    let aligned = align_centers(pred, gt);
    let te = aligned
        .iter()
        .zip(gt)
        .map(|(a, g)| (a - g.center()).norm())
        .sum::<f64>()
        / gt.len() as f64;
    Ok(PoseErrors {
        rre,
        rra15: rra(&errs, 15.0),
        rra30: rra(&errs, 30.0),
        te,
    })
}
