//! PnP-RANSAC: 6-point DLT hypotheses, inlier voting, Gauss-Newton refinement.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Matrix6, Rotation3, SymmetricEigen, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Grid, Intrinsics, PointMap, SE3Pose, ValidMask};

pub const SAMPLE_SIZE: usize = 6;
const RESAMPLE_ATTEMPTS: usize = 8;
const GN_MAX_STEPS: usize = 20;
const GN_DAMPING: f64 = 1e-6;
const GN_STEP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    /// Inlier threshold in pixels; `None` means 0.5% of the image diagonal.
    pub threshold_px: Option<f64>,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            iterations: 256,
            threshold_px: None,
            min_inliers: 12,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn with_seed(seed: u64) -> Self {
        RansacParams {
            seed,
            ..Default::default()
        }
    }

    pub fn threshold(&self, k: &Intrinsics) -> f64 {
        self.threshold_px.unwrap_or(0.005 * k.diagonal())
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("RANSAC needs at least one iteration".into()));
        }
        if let Some(t) = self.threshold_px {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("threshold must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PnpSolution {
    /// Camera-to-reference pose.
    pub pose: SE3Pose,
    pub inliers: ValidMask,
    pub inlier_count: usize,
    /// Index of the winning hypothesis.
    pub hypothesis: usize,
}

/// World-to-camera transform used internally by the solver.
#[derive(Debug, Clone, Copy)]
struct Extrinsics {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Extrinsics {
    fn pose(&self) -> SE3Pose {
        SE3Pose::new(self.r, self.t).inverse()
    }
}

fn normalization_3d(points: &[Vector3<f64>]) -> Option<Matrix4<f64>> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return None;
    }
    let s = 3f64.sqrt() / mean;
    let mut t = Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-c * s));
    Some(t)
}

fn normalization_2d(points: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return None;
    }
    let s = 2f64.sqrt() / mean;
    Some(Matrix3::new(s, 0.0, -c.x * s, 0.0, s, -c.y * s, 0.0, 0.0, 1.0))
}

/// Linear pose from ≥ 6 correspondences between world points and
/// normalized image coordinates `(x/z, y/z)`. Returns `None` when degenerate.
fn dlt(world: &[Vector3<f64>], image: &[Vector2<f64>]) -> Option<Extrinsics> {
    let n = world.len();
    if n < SAMPLE_SIZE || image.len() != n {
        return None;
    }
    let t3 = normalization_3d(world)?;
    let t2 = normalization_2d(image)?;
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (k, (x, u)) in world.iter().zip(image).enumerate() {
        let xh = t3 * x.push(1.0);
        let uh = t2 * u.push(1.0);
        let (uu, vv) = (uh.x / uh.z, uh.y / uh.z);
        for c in 0..4 {
            a[(2 * k, c)] = xh[c];
            a[(2 * k, 8 + c)] = -uu * xh[c];
            a[(2 * k + 1, 4 + c)] = xh[c];
            a[(2 * k + 1, 8 + c)] = -vv * xh[c];
        }
    }
    let ata = a.transpose() * &a;
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let largest = eig.eigenvalues[order[11]];
    // A second (near-)null direction means the sample does not pin down P.
    if !(eig.eigenvalues[order[1]] > 1e-10 * largest) {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]);
    let pn = Matrix3x4::from_row_slice(v.as_slice());
    let mut p = t2.try_inverse()? * pn * t3;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let scale = svd.singular_values.sum() / 3.0;
    if !(scale > 1e-12) {
        return None;
    }
    let r = u * vt;
    if r.determinant() < 0.0 {
        return None;
    }
    let t = p.column(3) / scale;
    if !r.iter().chain(t.iter()).all(|v| v.is_finite()) {
        return None;
    }
    Some(Extrinsics { r, t: t.into() })
}

fn reprojection_error(e: &Extrinsics, x: &Vector3<f64>, y: &Vector2<f64>, k: &Intrinsics) -> f64 {
    let pc = e.r * x + e.t;
    if !(pc.z > 0.0) {
        return f64::INFINITY;
    }
    let px = Vector2::new(k.focal * pc.x / pc.z + k.cx(), k.focal * pc.y / pc.z + k.cy());
    (px - y).norm()
}

fn reprojection_cost(e: &Extrinsics, world: &[Vector3<f64>], pixels: &[Vector2<f64>], k: &Intrinsics) -> f64 {
    world
        .iter()
        .zip(pixels)
        .map(|(x, y)| reprojection_error(e, x, y, k).powi(2))
        .sum()
}

/// Gauss-Newton on squared reprojection residuals with a left-multiplied
/// rotation update. Steps that increase the cost are rejected.
fn refine(mut e: Extrinsics, world: &[Vector3<f64>], pixels: &[Vector2<f64>], k: &Intrinsics) -> Extrinsics {
    let f = k.focal;
    let mut cost = reprojection_cost(&e, world, pixels, k);
    for _ in 0..GN_MAX_STEPS {
        let mut h = Matrix6::<f64>::identity() * GN_DAMPING;
        let mut g = Vector6::<f64>::zeros();
        for (x, y) in world.iter().zip(pixels) {
            let pc = e.r * x + e.t;
            if !(pc.z > 0.0) {
                continue;
            }
            let iz = 1.0 / pc.z;
            let r = Vector2::new(f * pc.x * iz + k.cx() - y.x, f * pc.y * iz + k.cy() - y.y);
            // d(pixel)/d(pc)
            let du = Vector3::new(f * iz, 0.0, -f * pc.x * iz * iz);
            let dv = Vector3::new(0.0, f * iz, -f * pc.y * iz * iz);
            // d(pc)/d(omega) = -[pc]x, d(pc)/dv = I
            let ju = Vector6::new(
                du.z * pc.y - du.y * pc.z,
                du.x * pc.z - du.z * pc.x,
                du.y * pc.x - du.x * pc.y,
                du.x,
                du.y,
                du.z,
            );
            let jv = Vector6::new(
                dv.z * pc.y - dv.y * pc.z,
                dv.x * pc.z - dv.z * pc.x,
                dv.y * pc.x - dv.x * pc.y,
                dv.x,
                dv.y,
                dv.z,
            );
            h += ju * ju.transpose() + jv * jv.transpose();
            g += ju * r.x + jv * r.y;
        }
        let Some(step) = h.cholesky().map(|c| -c.solve(&g)) else {
            break;
        };
        let omega = Vector3::new(step[0], step[1], step[2]);
        let dr = Rotation3::new(omega).into_inner();
        let cand = Extrinsics {
            r: crate::geometry::orthonormalize(&(dr * e.r)),
            t: dr * e.t + Vector3::new(step[3], step[4], step[5]),
        };
        let cand_cost = reprojection_cost(&cand, world, pixels, k);
        if !(cand_cost <= cost) {
            break;
        }
        e = cand;
        cost = cand_cost;
        if step.norm() < GN_STEP_TOL {
            break;
        }
    }
    e
}

fn inlier_flags(e: &Extrinsics, world: &[Vector3<f64>], pixels: &[Vector2<f64>], k: &Intrinsics, thr: f64) -> Vec<bool> {
    world
        .iter()
        .zip(pixels)
        .map(|(x, y)| reprojection_error(e, x, y, k) < thr)
        .collect()
}

fn select<T: Copy>(v: &[T], flags: &[bool]) -> Vec<T> {
    v.iter().zip(flags).filter(|(_, &f)| f).map(|(x, _)| *x).collect()
}

/// Recovers the camera-to-reference pose of a view from its reference-frame
/// point map `points`, pixel coordinates `pixels`, and validity `mask`.
pub fn solve_pnp_ransac(
    points: &PointMap,
    pixels: &Grid<Vector2<f64>>,
    mask: &ValidMask,
    k: &Intrinsics,
    params: &RansacParams,
) -> Result<PnpSolution> {
    params.validate()?;
    if !points.same_shape(mask) || !points.same_shape(pixels) {
        return Err(Error::ShapeMismatch("point map, pixel map and mask differ".into()));
    }
    let mut index = Vec::new();
    let mut world = Vec::new();
    let mut image = Vec::new();
    for (i, ((x, y), &m)) in points.data.iter().zip(&pixels.data).zip(&mask.data).enumerate() {
        if m && x.iter().all(|v| v.is_finite()) {
            index.push(i);
            world.push(*x);
            image.push(*y);
        }
    }
    let needed = params.min_inliers.max(SAMPLE_SIZE);
    if world.len() < needed {
        return Err(Error::TooFewPoints {
            needed,
            got: world.len(),
        });
    }
    let normalized: Vec<Vector2<f64>> = image
        .iter()
        .map(|y| Vector2::new((y.x - k.cx()) / k.focal, (y.y - k.cy()) / k.focal))
        .collect();
    let thr = params.threshold(k);

    // Samples are drawn sequentially so the hypothesis set depends only on the seed.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let samples: Vec<Vec<Vec<usize>>> = (0..params.iterations)
        .map(|_| {
            (0..RESAMPLE_ATTEMPTS)
                .map(|_| sample(&mut rng, world.len(), SAMPLE_SIZE).into_vec())
                .collect()
        })
        .collect();

    let scored: Vec<Option<(usize, Extrinsics)>> = samples
        .par_iter()
        .map(|attempts| {
            attempts.iter().find_map(|idx| {
                let w: Vec<_> = idx.iter().map(|&i| world[i]).collect();
                let u: Vec<_> = idx.iter().map(|&i| normalized[i]).collect();
                dlt(&w, &u)
            })
            .map(|e| {
                let count = world
                    .iter()
                    .zip(&image)
                    .filter(|(x, y)| reprojection_error(&e, x, y, k) < thr)
                    .count();
                (count, e)
            })
        })
        .collect();

    let mut best: Option<(usize, usize, Extrinsics)> = None;
    for (h, s) in scored.iter().enumerate() {
        if let Some((count, e)) = s {
            if best.as_ref().is_none_or(|b| *count > b.1) {
                best = Some((h, *count, *e));
            }
        }
    }
    let Some((hypothesis, count, e)) = best else {
        return Err(Error::Ransac(format!(
            "all {} iterations drew degenerate samples",
            params.iterations
        )));
    };
    if count < params.min_inliers {
        return Err(Error::Ransac(format!(
            "best hypothesis has {count} inliers, need {}",
            params.min_inliers
        )));
    }

    let mut flags = inlier_flags(&e, &world, &image, k, thr);
    let mut e = refine(e, &select(&world, &flags), &select(&image, &flags), k);
    let refreshed = inlier_flags(&e, &world, &image, k, thr);
    if refreshed.iter().filter(|&&f| f).count() >= params.min_inliers && refreshed != flags {
        flags = refreshed;
        e = refine(e, &select(&world, &flags), &select(&image, &flags), k);
        flags = inlier_flags(&e, &world, &image, k, thr);
    }

    let mut inliers = Grid::filled(points.width, points.height, false);
    for (&i, &f) in index.iter().zip(&flags) {
        inliers.data[i] = f;
    }
    let inlier_count = inliers.count();
    if inlier_count < params.min_inliers {
        return Err(Error::Ransac(format!(
            "refined pose keeps {inlier_count} inliers, need {}",
            params.min_inliers
        )));
    }
    Ok(PnpSolution {
        pose: e.pose(),
        inliers,
        inlier_count,
        hypothesis,
    })
}
