//! Forward software rasterizer for 3D Gaussians.
//!
//! Every Gaussian is projected with the local affine (EWA) approximation,
//! then each pixel composites the splats covering it front to back in exact
//! depth order. There is no tiling: per-pixel candidate lists are built once
//! and sorted by `(depth, input index)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, SE3Pose};
use crate::gsmap::GaussianPrimitive;

pub const NEAR_PLANE: f64 = 0.01;
/// Added to every screen-space covariance, pixels².
pub const COV_REGULARIZER: f64 = 0.1;
pub const MAX_ALPHA: f64 = 0.999;
/// Squared Mahalanobis radius of the footprint (3σ).
pub const CUTOFF_SQ: f64 = 9.0;
const ALPHA_EPS: f64 = 1e-10;

pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
pub const BLACK: [f64; 3] = [0.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

pub fn world_covariance(g: &GaussianPrimitive) -> Matrix3<f64> {
    let r = g.rotation.to_matrix();
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    r * s2 * r.transpose()
}

/// Perspective Jacobian of `(f x/z + cx, f y/z + cy)` at a camera-frame point.
pub fn projection_jacobian(pc: &Vector3<f64>, focal: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        focal * iz,
        0.0,
        -focal * pc.x * iz * iz,
        0.0,
        focal * iz,
        -focal * pc.y * iz * iz,
    )
}

pub fn project_gaussian(
    g: &GaussianPrimitive,
    pose: &SE3Pose,
    k: &Intrinsics,
) -> Result<ProjectedGaussian> {
    let pc = pose.to_camera(&g.mu);
    if !(pc.z > NEAR_PLANE) {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let w = pose.rotation.transpose();
    let jw = projection_jacobian(&pc, k.focal) * w;
    let cov = jw * world_covariance(g) * jw.transpose() + Matrix2::identity() * COV_REGULARIZER;
    let iz = 1.0 / pc.z;
    Ok(ProjectedGaussian {
        mean: Vector2::new(
            k.focal * pc.x * iz + k.cx(),
            k.focal * pc.y * iz + k.cy(),
        ),
        cov,
        depth: pc.z,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, background already blended in.
    pub color: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    /// Alpha-weighted expected depth; 0 where nothing was drawn.
    pub depth: Vec<f64>,
    pub background: [f64; 3],
    /// Gaussians dropped for lying behind the near plane.
    pub skipped: usize,
}

impl RenderOutput {
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        self.color[row * self.width + col]
    }
}

#[derive(Clone, Copy)]
struct Splat {
    depth: f64,
    index: u32,
    alpha: f64,
}

pub fn render(
    prims: &[GaussianPrimitive],
    pose: &SE3Pose,
    k: &Intrinsics,
    background: [f64; 3],
) -> RenderOutput {
    let (width, height) = (k.width, k.height);
    let projected: Vec<Option<ProjectedGaussian>> = prims
        .par_iter()
        .map(|g| project_gaussian(g, pose, k).ok())
        .collect();
    let skipped = projected.iter().filter(|p| p.is_none()).count();

    let mut lists: Vec<Vec<Splat>> = vec![Vec::new(); width * height];
    for (index, (g, p)) in prims.iter().zip(&projected).enumerate() {
        let Some(p) = p else { continue };
        let det = p.cov.determinant();
        if !(det > 0.0) || !p.mean.iter().all(|v| v.is_finite()) {
            continue;
        }
        let conic = Matrix2::new(p.cov[(1, 1)], -p.cov[(0, 1)], -p.cov[(1, 0)], p.cov[(0, 0)]) / det;
        let rx = 3.0 * p.cov[(0, 0)].sqrt();
        let ry = 3.0 * p.cov[(1, 1)].sqrt();
        let x0 = (p.mean.x - rx).ceil().max(0.0);
        let x1 = (p.mean.x + rx).floor().min(width as f64 - 1.0);
        let y0 = (p.mean.y - ry).ceil().max(0.0);
        let y1 = (p.mean.y + ry).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for row in y0 as usize..=y1 as usize {
            for col in x0 as usize..=x1 as usize {
                let d = Vector2::new(col as f64 - p.mean.x, row as f64 - p.mean.y);
                let m = (d.transpose() * conic * d)[(0, 0)];
                if m > CUTOFF_SQ {
                    continue;
                }
                let alpha = (g.opacity * (-0.5 * m).exp()).min(MAX_ALPHA);
                if alpha > 0.0 {
                    lists[row * width + col].push(Splat {
                        depth: p.depth,
                        index: index as u32,
                        alpha,
                    });
                }
            }
        }
    }

    let shaded: Vec<([f64; 3], f64, f64)> = lists
        .into_par_iter()
        .map(|mut splats| {
            splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
            let mut c = [0.0; 3];
            let mut z = 0.0;
            let mut transmittance = 1.0;
            for s in &splats {
                let w = s.alpha * transmittance;
                let col = prims[s.index as usize].color;
                for ch in 0..3 {
                    c[ch] += col[ch] * w;
                }
                z += s.depth * w;
                transmittance *= 1.0 - s.alpha;
            }
            let a = 1.0 - transmittance;
            for ch in 0..3 {
                c[ch] += transmittance * background[ch];
            }
            let depth = if a > 0.0 { z / a.max(ALPHA_EPS) } else { 0.0 };
            (c, a, depth)
        })
        .collect();

    let mut out = RenderOutput {
        width,
        height,
        color: Vec::with_capacity(shaded.len()),
        alpha: Vec::with_capacity(shaded.len()),
        depth: Vec::with_capacity(shaded.len()),
        background,
        skipped,
    };
    for (c, a, z) in shaded {
        out.color.push(c);
        out.alpha.push(a);
        out.depth.push(z);
    }
    out
}
