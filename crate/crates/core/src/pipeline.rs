//! End-to-end pose-free reconstruction: Gaussians, focal length and poses
//! from uncalibrated images.

use serde::{Deserialize, Serialize};

use crate::calib::{
    build_mask_scene, estimate_focal_multi, estimate_focal_single, solve_pnp_ransac, RansacParams,
    DEFAULT_TAU,
};
use crate::error::{Error, Result};
use crate::geometry::{pixel_grid, Intrinsics, SE3Pose, ValidMask};
use crate::gsmap::{GaussianMap, GaussianPrimitive, PrimitiveMap};
use crate::metrics::ColorImage;
use crate::model::Model;
use crate::renderer::{render, RenderOutput};
use crate::synth::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub mode: Mode,
    pub ransac: RansacParams,
    /// Visibility threshold on predicted opacity when no masks are given.
    pub tau: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            mode: Mode::Object,
            ransac: RansacParams::default(),
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFailure {
    pub view: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub maps: Vec<GaussianMap>,
    pub primitives: Vec<PrimitiveMap>,
    pub intrinsics: Intrinsics,
    pub per_view_focals: Vec<f64>,
    /// `poses[0]` is the identity; `None` where PnP failed.
    pub poses: Vec<Option<SE3Pose>>,
    pub masks: Vec<ValidMask>,
    pub inlier_counts: Vec<usize>,
    pub failures: Vec<ViewFailure>,
}

impl Reconstruction {
    pub fn all_primitives(&self) -> Vec<GaussianPrimitive> {
        self.primitives.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    /// Poses with failed views replaced by the identity.
    pub fn poses_or_identity(&self) -> Vec<SE3Pose> {
        self.poses.iter().map(|p| p.unwrap_or_default()).collect()
    }

    pub fn render_at(&self, pose: &SE3Pose, background: [f64; 3]) -> RenderOutput {
        render(&self.all_primitives(), pose, &self.intrinsics, background)
    }
}

fn check_uniform(images: &[ColorImage]) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("no input images".into()));
    };
    for (n, img) in images.iter().enumerate() {
        if !img.same_shape(first) {
            return Err(Error::ShapeMismatch(format!(
                "image {n} is {}x{} but image 0 is {}x{}",
                img.width, img.height, first.width, first.height
            )));
        }
    }
    Ok(())
}

/// Predicts Gaussians for `images`, estimates a shared focal length from
/// per-view monocular predictions, and solves every source view's pose by
/// PnP-RANSAC against the joint prediction.
///
/// `masks` (foreground masks, e.g. from background removal) take the place of
/// opacity-thresholded visibility masks when given. PnP failures are recorded
/// per view rather than returned as errors.
pub fn reconstruct(
    model: &Model,
    images: &[ColorImage],
    masks: Option<&[ValidMask]>,
    opts: &ReconstructOptions,
) -> Result<Reconstruction> {
    check_uniform(images)?;
    if let Some(m) = masks {
        if m.len() != images.len() || m.iter().any(|m| !m.same_shape(&images[0])) {
            return Err(Error::ShapeMismatch("masks do not match the images".into()));
        }
    }
    let maps = model.forward(images)?;
    let primitives: Vec<PrimitiveMap> = maps.iter().map(|m| m.decode()).collect::<Result<_>>()?;
    let masks: Vec<ValidMask> = match masks {
        Some(m) => m.to_vec(),
        None => maps
            .iter()
            .map(|m| build_mask_scene(&m.opacity_map(), opts.tau))
            .collect::<Result<_>>()?,
    };

    let mut per_view_focals = Vec::with_capacity(images.len());
    for (img, mask) in images.iter().zip(&masks) {
        let mono = model.forward(std::slice::from_ref(img))?;
        if let Ok(est) = estimate_focal_single(&mono[0].positions(), mask) {
            per_view_focals.push(est.focal);
        }
    }
    let focal = estimate_focal_multi(&per_view_focals)
        .map_err(|_| Error::Degenerate("focal estimation failed on every view".into()))?;
    let intrinsics = Intrinsics::new(focal, images[0].width, images[0].height)?;

    let pixels = pixel_grid(intrinsics.width, intrinsics.height);
    let mut poses = vec![Some(SE3Pose::identity())];
    let mut inlier_counts = vec![masks[0].count()];
    let mut failures = Vec::new();
    for n in 1..images.len() {
        let params = RansacParams {
            seed: opts.ransac.seed.wrapping_add(n as u64),
            ..opts.ransac
        };
        match solve_pnp_ransac(&maps[n].positions(), &pixels, &masks[n], &intrinsics, &params) {
            Ok(sol) => {
                poses.push(Some(sol.pose));
                inlier_counts.push(sol.inlier_count);
            }
            Err(e) => {
                poses.push(None);
                inlier_counts.push(0);
                failures.push(ViewFailure {
                    view: n,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(Reconstruction {
        maps,
        primitives,
        intrinsics,
        per_view_focals,
        poses,
        masks,
        inlier_counts,
        failures,
    })
}
