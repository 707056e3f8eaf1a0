//! Rigid transforms, quaternions, and the pinhole camera.
//!
//! Conventions used throughout the crate:
//!
//! * camera frame is x right, y down, z forward;
//! * [`SE3Pose`] maps camera-frame points into the reference frame,
//!   `x_ref = R * x_cam + t`, so the reference view's pose is the identity;
//! * pixel `(i, j)` means column `i`, row `j`, with the principal point at
//!   `(W/2, H/2)` and square pixels.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit quaternion stored as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    pub q: [f64; 4],
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        q: [1.0, 0.0, 0.0, 0.0],
    };

    /// Normalizes `q`; near-zero input falls back to the identity.
    pub fn normalized(q: [f64; 4]) -> Rotation {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 1e-12) || !n.is_finite() {
            return Rotation::IDENTITY;
        }
        Rotation {
            q: [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Rotation {
        let a = axis.normalize() * (0.5 * angle).sin();
        Rotation::normalized([(0.5 * angle).cos(), a.x, a.y, a.z])
    }

    pub fn norm(&self) -> f64 {
        self.q.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        quat_to_mat(self)
    }

    /// Hamilton product `self ⊗ other`, i.e. apply `other` first.
    pub fn mul(&self, other: &Rotation) -> Rotation {
        let [w1, x1, y1, z1] = self.q;
        let [w2, x2, y2, z2] = other.q;
        Rotation::normalized([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    /// Quaternion of an orthonormal matrix (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<f64>) -> Rotation {
        let tr = m.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            [
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            ]
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            ]
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            ]
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            [
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            ]
        };
        Rotation::normalized(q)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::IDENTITY
    }
}

pub fn quat_to_mat(r: &Rotation) -> Matrix3<f64> {
    let [w, x, y, z] = r.q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Closest rotation to `m` in the Frobenius sense, with det = +1.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    r
}

/// Camera-to-reference rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        SE3Pose::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> SE3Pose {
        SE3Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> SE3Pose {
        SE3Pose {
            rotation,
            translation,
        }
    }

    /// `a ∘ b`: apply `b` first, then `a`.
    pub fn compose(&self, b: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * b.rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Maps a reference-frame point into this camera's frame.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera center in the reference frame.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn orthonormalized(&self) -> SE3Pose {
        SE3Pose {
            rotation: orthonormalize(&self.rotation),
            translation: self.translation,
        }
    }

    pub fn scaled(&self, s: f64) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<SE3Pose> {
        if v.len() != 16 {
            return Err(Error::BadLength {
                expected: 16,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pose matrix"));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Ok(SE3Pose {
            rotation,
            translation,
        })
    }
}

/// Pinhole intrinsics with a centered principal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(focal: f64, width: usize, height: usize) -> Result<Intrinsics> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal length must be positive, got {focal}"
            )));
        }
        Ok(Intrinsics {
            focal,
            width,
            height,
        })
    }

    /// Focal length giving the requested horizontal field of view.
    pub fn from_fov(fov_x_deg: f64, width: usize, height: usize) -> Result<Intrinsics> {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Intrinsics::new(f, width, height)
    }

    pub fn cx(&self) -> f64 {
        self.width as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height as f64 / 2.0
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal,
            0.0,
            self.cx(),
            0.0,
            self.focal,
            self.cy(),
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }

    /// Camera-frame direction with unit z through pixel `(i, j)`.
    pub fn ray(&self, i: f64, j: f64) -> Vector3<f64> {
        Vector3::new((i - self.cx()) / self.focal, (j - self.cy()) / self.focal, 1.0)
    }

    pub fn with_focal(&self, focal: f64) -> Intrinsics {
        Intrinsics { focal, ..*self }
    }
}

/// Dense row-major H×W grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Grid<T> {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Grid<T>> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} needs {} entries, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Grid<T> {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

pub type PointMap = Grid<Vector3<f64>>;
pub type DepthMap = Grid<f64>;
pub type ValidMask = Grid<bool>;

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Sentinel stored at invalid point-map entries.
pub const INVALID_POINT: Vector3<f64> = Vector3::new(f64::NAN, f64::NAN, f64::NAN);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Projects a reference-frame point into the camera described by `pose`.
pub fn project(point: &Vector3<f64>, pose: &SE3Pose, k: &Intrinsics) -> Result<Projection> {
    let pc = pose.to_camera(point);
    project_camera(&pc, k)
}

/// Projects a point already expressed in the camera frame.
pub fn project_camera(pc: &Vector3<f64>, k: &Intrinsics) -> Result<Projection> {
    if !(pc.z > 0.0) {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    Ok(Projection {
        pixel: Vector2::new(
            k.focal * pc.x / pc.z + k.cx(),
            k.focal * pc.y / pc.z + k.cy(),
        ),
        depth: pc.z,
    })
}

/// Reference-frame point seen at pixel `(i, j)` with camera-frame depth `depth`.
pub fn unproject_pixel(
    i: f64,
    j: f64,
    depth: f64,
    k: &Intrinsics,
    pose: &SE3Pose,
) -> Vector3<f64> {
    pose.transform_point(&(k.ray(i, j) * depth))
}

pub fn unproject_depth(
    depth: &DepthMap,
    k: &Intrinsics,
    pose: &SE3Pose,
    mask: &ValidMask,
) -> Result<PointMap> {
    if !depth.same_shape(mask) {
        return Err(Error::ShapeMismatch("depth map and mask differ".into()));
    }
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::ShapeMismatch(format!(
            "depth map is {}x{} but intrinsics are {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    let mut data = Vec::with_capacity(depth.len());
    for row in 0..depth.height {
        for col in 0..depth.width {
            if !*mask.get(row, col) {
                data.push(INVALID_POINT);
                continue;
            }
            let d = *depth.get(row, col);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::InvalidDepth { row, col, depth: d });
            }
            data.push(unproject_pixel(col as f64, row as f64, d, k, pose));
        }
    }
    Grid::from_vec(depth.width, depth.height, data)
}

/// Pixel coordinates of every grid cell, `(col, row)` per entry.
pub fn pixel_grid(width: usize, height: usize) -> Grid<Vector2<f64>> {
    Grid::from_fn(width, height, |row, col| Vector2::new(col as f64, row as f64))
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Look-at camera pose (camera-to-world) with world up `up`.
///
/// The optical axis passes through `target`; `up` must not be parallel to it.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> SE3Pose {
    let z = (target - eye).normalize();
    let x = z.cross(up).normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, z]);
    SE3Pose::new(rotation, *eye)
}
