//! Gaussian primitives, per-pixel Gaussian maps, and scale normalization.

mod ply;

pub use ply::{read_ply, read_ply_records, write_ply, write_ply_records, PlyRecord, PLY_PROPERTIES};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Grid, PointMap, Rotation, ValidMask};

/// Channels per Gaussian: position 3, rotation 4, scale 3, opacity 1, color 3.
pub const Q: usize = 14;

pub const MIN_SCALE: f64 = 1e-4;
/// Upper clamp on decoded scales, reference-frame units.
pub const MAX_SCALE: f64 = 1.0;

pub mod channel {
    use std::ops::Range;
    pub const POSITION: Range<usize> = 0..3;
    pub const ROTATION: Range<usize> = 3..7;
    pub const SCALE: Range<usize> = 7..10;
    pub const OPACITY: usize = 10;
    pub const COLOR: Range<usize> = 11..14;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub rotation: Rotation,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianPrimitive {
    pub fn is_valid(&self) -> bool {
        (self.rotation.norm() - 1.0).abs() < 1e-9
            && self.scale.iter().all(|&s| s > 0.0 && s.is_finite())
            && (0.0..=1.0).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && self.mu.iter().all(|v| v.is_finite())
    }

    /// Raw channel vector that [`decode_raw`] maps back to this primitive.
    ///
    /// Scales outside `[MIN_SCALE, MAX_SCALE]` and opacities/colors at
    /// exactly 0 or 1 cannot be represented and are clamped.
    pub fn encode(&self) -> [f64; Q] {
        let mut raw = [0.0; Q];
        raw[0..3].copy_from_slice(self.mu.as_slice());
        raw[3..7].copy_from_slice(&self.rotation.q);
        for a in 0..3 {
            raw[7 + a] = inverse_softplus(self.scale[a].clamp(MIN_SCALE, MAX_SCALE));
        }
        raw[channel::OPACITY] = logit(self.opacity);
        for c in 0..3 {
            raw[11 + c] = logit(self.color[c]);
        }
        raw
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

pub fn decode_raw(raw: &[f64]) -> Result<GaussianPrimitive> {
    if raw.len() != Q {
        return Err(Error::BadLength {
            expected: Q,
            got: raw.len(),
        });
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw Gaussian channels"));
    }
    Ok(decode_finite(raw))
}

fn decode_finite(raw: &[f64]) -> GaussianPrimitive {
    let scale = Vector3::from_fn(|a, _| softplus(raw[7 + a]).clamp(MIN_SCALE, MAX_SCALE));
    GaussianPrimitive {
        mu: Vector3::new(raw[0], raw[1], raw[2]),
        rotation: Rotation::normalized([raw[3], raw[4], raw[5], raw[6]]),
        scale,
        opacity: sigmoid(raw[channel::OPACITY]),
        color: [sigmoid(raw[11]), sigmoid(raw[12]), sigmoid(raw[13])],
    }
}

/// H×W grid of raw `Q`-channel vectors, as produced by the network head.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `Q` channels per pixel.
    pub raw: Vec<f64>,
}

pub type PrimitiveMap = Grid<GaussianPrimitive>;
pub type OpacityMap = Grid<f64>;

impl GaussianMap {
    pub fn new(width: usize, height: usize, raw: Vec<f64>) -> Result<GaussianMap> {
        if raw.len() != width * height * Q {
            return Err(Error::ShapeMismatch(format!(
                "Gaussian map {}x{} needs {} raw values, got {}",
                width,
                height,
                width * height * Q,
                raw.len()
            )));
        }
        Ok(GaussianMap { width, height, raw })
    }

    pub fn zeros(width: usize, height: usize) -> GaussianMap {
        GaussianMap {
            width,
            height,
            raw: vec![0.0; width * height * Q],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * Q;
        &self.raw[o..o + Q]
    }

    pub fn decode(&self) -> Result<PrimitiveMap> {
        let prims = self
            .raw
            .chunks_exact(Q)
            .map(decode_raw)
            .collect::<Result<Vec<_>>>()?;
        Grid::from_vec(self.width, self.height, prims)
    }

    /// First three channels, which are used directly as positions.
    pub fn positions(&self) -> PointMap {
        Grid {
            width: self.width,
            height: self.height,
            data: self
                .raw
                .chunks_exact(Q)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        }
    }

    pub fn opacity_map(&self) -> OpacityMap {
        Grid {
            width: self.width,
            height: self.height,
            data: self
                .raw
                .chunks_exact(Q)
                .map(|c| sigmoid(c[channel::OPACITY]))
                .collect(),
        }
    }
}

/// Mean distance to the origin of all masked points, accumulated over views.
pub fn mean_masked_distance(points: &[PointMap], masks: &[ValidMask]) -> Result<f64> {
    if points.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} point maps but {} masks",
            points.len(),
            masks.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pts, mask) in points.iter().zip(masks) {
        if !pts.same_shape(mask) {
            return Err(Error::ShapeMismatch("point map and mask differ".into()));
        }
        for (p, &m) in pts.data.iter().zip(&mask.data) {
            if m {
                sum += p.norm();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Rescales positions and scales so the masked mean distance becomes 1.
///
/// Returns the rescaled maps and the applied factor `1 / d`.
pub fn rescale_gaussians(
    maps: &[PrimitiveMap],
    masks: &[ValidMask],
) -> Result<(Vec<PrimitiveMap>, f64)> {
    let positions: Vec<PointMap> = maps.iter().map(|m| m.map(|g| g.mu)).collect();
    let d = mean_masked_distance(&positions, masks)?;
    if !(d > 0.0) {
        return Err(Error::Degenerate(
            "all masked Gaussians sit at the origin".into(),
        ));
    }
    let s = 1.0 / d;
    let out = maps
        .iter()
        .map(|m| {
            m.map(|g| GaussianPrimitive {
                mu: g.mu * s,
                scale: g.scale * s,
                ..*g
            })
        })
        .collect();
    Ok((out, s))
}
