use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::{PointMap, ValidMask};

pub const MIN_FOCAL_POINTS: usize = 8;
pub const MAX_WEISZFELD_ITERS: usize = 10;
const RESIDUAL_FLOOR: f64 = 1e-8;
const REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FocalEstimate {
    pub focal: f64,
    pub iterations: usize,
    /// Objective `Σ‖p − f·u‖` at the initial guess and after every iteration.
    pub objective: Vec<f64>,
}

pub fn focal_objective(f: f64, pixels: &[Vector2<f64>], rays: &[Vector2<f64>]) -> f64 {
    pixels
        .iter()
        .zip(rays)
        .map(|(p, u)| (p - u * f).norm())
        .sum()
}

/// Minimizes `Σ‖p_k − f·u_k‖` over the scalar `f` by Weiszfeld iteration.
///
/// `pixels` are centered pixel coordinates, `rays` the matching `(x/z, y/z)`.
pub fn weiszfeld_focal(pixels: &[Vector2<f64>], rays: &[Vector2<f64>]) -> Result<FocalEstimate> {
    if pixels.len() != rays.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels but {} rays",
            pixels.len(),
            rays.len()
        )));
    }
    let (num, den) = pixels
        .iter()
        .zip(rays)
        .fold((0.0, 0.0), |(n, d), (p, u)| (n + p.dot(u), d + u.dot(u)));
    if !(den > 0.0) {
        return Err(Error::Degenerate(
            "all rays are on the optical axis".into(),
        ));
    }
    let mut f = num / den;
    let mut objective = vec![focal_objective(f, pixels, rays)];
    let mut iterations = 0;
    for _ in 0..MAX_WEISZFELD_ITERS {
        let (mut num, mut den) = (0.0, 0.0);
        for (p, u) in pixels.iter().zip(rays) {
            let w = 1.0 / (p - u * f).norm().max(RESIDUAL_FLOOR);
            num += w * p.dot(u);
            den += w * u.dot(u);
        }
        let next = num / den;
        iterations += 1;
        let step = (next - f).abs();
        f = next;
        objective.push(focal_objective(f, pixels, rays));
        if step < REL_TOL * f.abs() {
            break;
        }
    }
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::Degenerate(format!("focal estimate {f} is not positive")));
    }
    Ok(FocalEstimate {
        focal: f,
        iterations,
        objective,
    })
}

/// Focal length of a view whose points are expressed in its own camera frame.
pub fn estimate_focal_single(points: &PointMap, mask: &ValidMask) -> Result<FocalEstimate> {
    if !points.same_shape(mask) {
        return Err(Error::ShapeMismatch("point map and mask differ".into()));
    }
    let (cx, cy) = (points.width as f64 / 2.0, points.height as f64 / 2.0);
    let mut pixels = Vec::new();
    let mut rays = Vec::new();
    let mut masked = 0usize;
    for row in 0..points.height {
        for col in 0..points.width {
            if !*mask.get(row, col) {
                continue;
            }
            masked += 1;
            let x = points.get(row, col);
            if !(x.z > 0.0) || !x.iter().all(|v| v.is_finite()) {
                continue;
            }
            pixels.push(Vector2::new(col as f64 - cx, row as f64 - cy));
            rays.push(Vector2::new(x.x / x.z, x.y / x.z));
        }
    }
    if masked >= MIN_FOCAL_POINTS && pixels.is_empty() {
        return Err(Error::Degenerate("all masked points have zero or negative depth".into()));
    }
    if pixels.len() < MIN_FOCAL_POINTS {
        return Err(Error::TooFewPoints {
            needed: MIN_FOCAL_POINTS,
            got: pixels.len(),
        });
    }
    weiszfeld_focal(&pixels, &rays)
}

/// Shared focal for all views: the mean of the per-view estimates.
pub fn estimate_focal_multi(per_view: &[f64]) -> Result<f64> {
    if per_view.is_empty() {
        return Err(Error::InvalidArgument("no per-view focal estimates".into()));
    }
    if let Some(bad) = per_view.iter().find(|f| !(**f > 0.0)) {
        return Err(Error::InvalidArgument(format!("non-positive focal {bad}")));
    }
    Ok(per_view.iter().sum::<f64>() / per_view.len() as f64)
}
