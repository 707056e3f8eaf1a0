//! Training objectives with analytic gradients w.r.t. predicted positions.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointMap, SE3Pose, ValidMask};
use crate::metrics::{mse, ssim, ColorImage};
use crate::renderer::RenderOutput;

const RAY_EPS: f64 = 1e-8;
pub const SSIM_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_p: f64,
    /// Last step (inclusive) at which the position loss is applied.
    pub t_max: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_a: 1.0,
            lambda_p: 10.0,
            t_max: 2000,
        }
    }
}

impl LossWeights {
    pub fn position_active(&self, step: usize) -> bool {
        step <= self.t_max
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub render: f64,
    pub align: f64,
    pub pos: f64,
}

/// `L_render + λa·L_align + 1[t ≤ T_max]·λp·L_pos`.
pub fn total_loss(step: usize, c: &LossComponents, w: &LossWeights) -> f64 {
    let pos = if w.position_active(step) {
        w.lambda_p * c.pos
    } else {
        0.0
    };
    c.render + w.lambda_a * c.align + pos
}

/// Value and per-pixel gradient (zero where unsupervised).
pub type LossWithGrad = (f64, Vec<PointMap>);

fn zero_grads(maps: &[PointMap]) -> Vec<PointMap> {
    maps.iter().map(|m| m.map(|_| Vector3::zeros())).collect()
}

fn check_views(pred: &[PointMap], gt: &[PointMap], masks: Option<&[ValidMask]>) -> Result<()> {
    if pred.len() != gt.len() || masks.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::ShapeMismatch("view counts differ".into()));
    }
    for (n, (p, g)) in pred.iter().zip(gt).enumerate() {
        if !p.same_shape(g) || masks.is_some_and(|m| !m[n].same_shape(p)) {
            return Err(Error::ShapeMismatch(format!("view {n} has mismatched maps")));
        }
    }
    Ok(())
}

/// Mean per-pixel Euclidean distance between predicted and ground-truth
/// points over the masked pixels of all views.
pub fn position_loss(pred: &[PointMap], gt: &[PointMap], masks: &[ValidMask]) -> Result<LossWithGrad> {
    check_views(pred, gt, Some(masks))?;
    let mut grads = zero_grads(pred);
    let count: usize = masks.iter().map(|m| m.count()).sum();
    if count == 0 {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for n in 0..pred.len() {
        for i in 0..pred[n].len() {
            if !masks[n].data[i] {
                continue;
            }
            let diff = pred[n].data[i] - gt[n].data[i];
            let d = diff.norm();
            loss += d;
            if d > 0.0 {
                grads[n].data[i] = diff * (inv / d);
            }
        }
    }
    Ok((loss * inv, grads))
}

/// Mean ray-cosine misalignment `1 − cos(r̂, r)` where both rays start at the
/// view's camera center. `masks = None` supervises every pixel with a finite
/// ground-truth point.
pub fn alignment_loss(
    pred: &[PointMap],
    poses: &[SE3Pose],
    gt: &[PointMap],
    masks: Option<&[ValidMask]>,
) -> Result<LossWithGrad> {
    check_views(pred, gt, masks)?;
    if poses.len() != pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} poses for {} views",
            poses.len(),
            pred.len()
        )));
    }
    let mut grads = zero_grads(pred);
    let mut terms: Vec<(usize, usize, f64, Vector3<f64>)> = Vec::new();
    for n in 0..pred.len() {
        let origin = poses[n].center();
        for i in 0..pred[n].len() {
            if masks.is_some_and(|m| !m[n].data[i]) {
                continue;
            }
            let g = gt[n].data[i];
            if !g.iter().all(|v| v.is_finite()) {
                continue;
            }
            let rh = pred[n].data[i] - origin;
            let r = g - origin;
            let (nh, nr) = (rh.norm(), r.norm());
            if nh < RAY_EPS || nr < RAY_EPS {
                terms.push((n, i, 0.0, Vector3::zeros()));
                continue;
            }
            let cos = rh.dot(&r) / (nh * nr);
            // d(1 - cos)/d(rh)
            let grad = -(r / (nh * nr) - rh * (cos / (nh * nh)));
            terms.push((n, i, 1.0 - cos, grad));
        }
    }
    if terms.is_empty() {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / terms.len() as f64;
    let mut loss = 0.0;
    for (n, i, value, grad) in terms {
        loss += value;
        grads[n].data[i] = grad * inv;
    }
    Ok((loss * inv, grads))
}

pub fn render_target_loss(rendered: &ColorImage, target: &ColorImage) -> Result<f64> {
    Ok(mse(rendered, target)? + SSIM_WEIGHT * (1.0 - ssim(rendered, target)?))
}

/// `MSE + 0.2·(1 − SSIM)` between a render and its target image.
pub fn render_loss(rendered: &RenderOutput, target: &ColorImage) -> Result<f64> {
    let img = ColorImage::from_vec(rendered.width, rendered.height, rendered.color.clone())?;
    render_target_loss(&img, target)
}
