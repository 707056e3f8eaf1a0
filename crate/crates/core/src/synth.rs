//! Procedural blob scenes and exact ground-truth samples.
//!
//! Scenes are Gaussian sets themselves, so images, depths, masks and point
//! maps come straight out of the renderer with no approximation.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{build_mask_object, normalize_cameras_object, normalize_cameras_scene};
use crate::error::{Error, Result};
use crate::geometry::{look_at, unproject_depth, DepthMap, Grid, Intrinsics, PointMap, Rotation, SE3Pose, ValidMask};
use crate::gsmap::GaussianPrimitive;
use crate::metrics::ColorImage;
use crate::renderer::{render, BLACK, WHITE};

/// Reconstruction setting: a centered object on white, or an open scene on black.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Object,
    Scene,
}

impl Mode {
    pub fn background(self) -> [f64; 3] {
        match self {
            Mode::Object => WHITE,
            Mode::Scene => BLACK,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "object" => Ok(Mode::Object),
            "scene" => Ok(Mode::Scene),
            _ => Err(Error::InvalidArgument(format!("unknown mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Object => "object",
            Mode::Scene => "scene",
        })
    }
}

pub const MIN_BLOB_SCALE: f64 = 0.05;
pub const MAX_BLOB_SCALE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub object_center: Vector3<f64>,
    /// Radius of a sphere about `object_center` containing every blob center.
    pub radius: f64,
    pub seed: u64,
}

/// `blobs` random anisotropic blobs with centers in `[-1, 1]³`.
pub fn make_scene(seed: u64, blobs: usize) -> Result<SynthScene> {
    if blobs == 0 {
        return Err(Error::InvalidArgument("a scene needs at least one blob".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let primitives: Vec<GaussianPrimitive> = (0..blobs)
        .map(|_| GaussianPrimitive {
            mu: Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0)),
            rotation: Rotation::normalized(std::array::from_fn(|_| rng.random_range(-1.0..1.0))),
            scale: Vector3::from_fn(|_, _| rng.random_range(MIN_BLOB_SCALE..=MAX_BLOB_SCALE)),
            opacity: rng.random_range(0.7..=1.0),
            color: std::array::from_fn(|_| rng.random_range(0.0..=1.0)),
        })
        .collect();
    let radius = primitives.iter().map(|g| g.mu.norm()).fold(0.0, f64::max);
    Ok(SynthScene {
        primitives,
        object_center: Vector3::zeros(),
        radius,
        seed,
    })
}

/// How camera azimuths are chosen on an orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AzimuthLayout {
    /// Evenly spaced, starting at the given azimuth in degrees.
    Structured { offset_deg: f64 },
    /// Independently uniform on the circle.
    Random { seed: u64 },
}

/// Cameras on a circle of `radius` about `center` at `elevation_deg`, all
/// looking at the center, with world up `+z`.
pub fn sample_orbit_cameras(
    n: usize,
    elevation_deg: f64,
    radius: f64,
    center: &Vector3<f64>,
    layout: AzimuthLayout,
) -> Result<Vec<SE3Pose>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one camera".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("orbit radius must be positive, got {radius}")));
    }
    if !(elevation_deg.abs() < 90.0) {
        return Err(Error::InvalidArgument(format!("elevation {elevation_deg} is not below 90 degrees")));
    }
    let azimuths: Vec<f64> = match layout {
        AzimuthLayout::Structured { offset_deg } => (0..n)
            .map(|k| offset_deg + 360.0 * k as f64 / n as f64)
            .collect(),
        AzimuthLayout::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.random_range(0.0..360.0)).collect()
        }
    };
    let el = elevation_deg.to_radians();
    Ok(azimuths
        .into_iter()
        .map(|az| {
            let az = az.to_radians();
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            look_at(&(center + dir * radius), center, &Vector3::z())
        })
        .collect())
}

/// One training or evaluation tuple with normalized cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub mode: Mode,
    pub intrinsics: Intrinsics,
    /// 8-bit quantized colors in `[0, 1]`.
    pub images: Vec<ColorImage>,
    /// Normalized depths rounded to f32 precision; zero outside the mask.
    pub depths: Vec<DepthMap>,
    pub masks: Vec<ValidMask>,
    /// `unproject_depth(depths[n], intrinsics, poses[n], masks[n])`.
    pub points: Vec<PointMap>,
    /// Camera-to-reference poses; `poses[0]` is the identity.
    pub poses: Vec<SE3Pose>,
    /// World-to-normalized scale factor.
    pub scale: f64,
}

impl DatasetSample {
    pub fn views(&self) -> usize {
        self.images.len()
    }

    /// The sub-sample made of `views`, re-normalized so `views[0]` is the reference.
    pub fn subset(&self, views: &[usize]) -> Result<DatasetSample> {
        if views.is_empty() || views.iter().any(|&v| v >= self.views()) {
            return Err(Error::InvalidArgument(format!("bad view subset {views:?}")));
        }
        fn pick<T: Clone>(v: &[T], views: &[usize]) -> Vec<T> {
            views.iter().map(|&i| v[i].clone()).collect()
        }
        let poses: Vec<SE3Pose> = pick(&self.poses, views);
        let depths: Vec<DepthMap> = pick(&self.depths, views);
        let masks: Vec<ValidMask> = pick(&self.masks, views);
        let images: Vec<ColorImage> = pick(&self.images, views);
        let (poses, s) = match self.mode {
            Mode::Object => {
                // The object center sits at (0, 0, 2) in the current frame.
                normalize_cameras_object(&poses, &Vector3::new(0.0, 0.0, 2.0))?
            }
            Mode::Scene => {
                let pts: Vec<PointMap> = pick(&self.points, views);
                normalize_cameras_scene(&poses, &pts, &masks)?
            }
        };
        let depths: Vec<DepthMap> = depths.iter().map(|d| d.map(|&z| round_f32(z * s))).collect();
        let points = unproject_all(&depths, &self.intrinsics, &poses, &masks)?;
        Ok(DatasetSample {
            mode: self.mode,
            intrinsics: self.intrinsics,
            images,
            depths,
            masks,
            points,
            poses,
            scale: self.scale * s,
        })
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn quantize(c: f64) -> f64 {
    (c.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn unproject_all(
    depths: &[DepthMap],
    k: &Intrinsics,
    poses: &[SE3Pose],
    masks: &[ValidMask],
) -> Result<Vec<PointMap>> {
    depths
        .iter()
        .zip(poses)
        .zip(masks)
        .map(|((d, p), m)| unproject_depth(d, k, p, m))
        .collect()
}

/// Renders `scene` from world-frame `cameras` and normalizes the result.
pub fn render_dataset(
    scene: &SynthScene,
    cameras: &[SE3Pose],
    k: &Intrinsics,
    mode: Mode,
) -> Result<DatasetSample> {
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("no cameras to render".into()));
    }
    let renders: Vec<_> = cameras
        .iter()
        .map(|pose| render(&scene.primitives, pose, k, mode.background()))
        .collect();
    let (w, h) = (k.width, k.height);
    let mut images = Vec::with_capacity(renders.len());
    let mut raw_depths = Vec::with_capacity(renders.len());
    let mut masks = Vec::with_capacity(renders.len());
    for r in &renders {
        let alpha = Grid::from_vec(w, h, r.alpha.clone())?;
        masks.push(build_mask_object(&alpha));
        raw_depths.push(Grid::from_vec(w, h, r.depth.clone())?);
        images.push(Grid::from_vec(w, h, r.color.iter().map(|c| c.map(quantize)).collect())?);
    }
    if masks.iter().all(|m| m.count() == 0) {
        return Err(Error::EmptyMask);
    }
    let (poses, scale) = match mode {
        Mode::Object => normalize_cameras_object(cameras, &scene.object_center)?,
        Mode::Scene => {
            let world = unproject_all(&raw_depths, k, cameras, &masks)?;
            normalize_cameras_scene(cameras, &world, &masks)?
        }
    };
    let depths: Vec<DepthMap> = raw_depths
        .iter()
        .zip(&masks)
        .map(|(d, m)| {
            let data = d.data.iter().zip(&m.data).map(|(&z, &v)| if v { round_f32(z * scale) } else { 0.0 }).collect();
            Grid { width: d.width, height: d.height, data }
        })
        .collect();
    let points = unproject_all(&depths, k, &poses, &masks)?;
    Ok(DatasetSample {
        mode,
        intrinsics: *k,
        images,
        depths,
        masks,
        points,
        poses,
        scale,
    })
}

/// Generator settings for whole datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub resolution: usize,
    pub views: usize,
    pub fov_deg: f64,
    pub elevation_deg: f64,
    pub orbit_radius: f64,
    pub mode: Mode,
    /// Evenly spaced azimuths with a random start when false.
    pub random_azimuths: bool,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Every view must see at least this many foreground pixels.
    pub min_view_pixels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            resolution: 32,
            views: 4,
            fov_deg: 50.0,
            elevation_deg: 20.0,
            orbit_radius: 4.0,
            mode: Mode::Object,
            random_azimuths: false,
            min_blobs: 3,
            max_blobs: 10,
            min_view_pixels: 24,
        }
    }
}

impl SynthConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.fov_deg, self.resolution, self.resolution)
    }

    fn validate(&self) -> Result<()> {
        if self.views == 0 || self.resolution == 0 {
            return Err(Error::InvalidArgument("views and resolution must be positive".into()));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(Error::InvalidArgument(format!(
                "bad blob range {}..={}",
                self.min_blobs, self.max_blobs
            )));
        }
        Ok(())
    }
}

/// Seed of the `index`-th scene of a dataset drawn with `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

const MAX_REDRAWS: u64 = 64;

/// Draws one sample; scenes where some view sees too few foreground pixels
/// are redrawn from derived seeds. Returns the sample, its scene, and the
/// seed that produced it.
pub fn sample_scene(seed: u64, cfg: &SynthConfig) -> Result<(DatasetSample, SynthScene)> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let mut last = Error::EmptyMask;
    for attempt in 0..MAX_REDRAWS {
        let s = if attempt == 0 { seed } else { scene_seed(seed, u64::MAX - attempt) };
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let blobs = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
        let scene = make_scene(rng.random(), blobs)?;
        let layout = if cfg.random_azimuths {
            AzimuthLayout::Random { seed: rng.random() }
        } else {
            AzimuthLayout::Structured {
                offset_deg: rng.random_range(0.0..360.0),
            }
        };
        let cams = sample_orbit_cameras(cfg.views, cfg.elevation_deg, cfg.orbit_radius, &scene.object_center, layout)?;
        match render_dataset(&scene, &cams, &k, cfg.mode) {
            Ok(sample) if sample.masks.iter().all(|m| m.count() >= cfg.min_view_pixels) => {
                return Ok((sample, SynthScene { seed: s, ..scene }));
            }
            Ok(_) => last = Error::Degenerate(format!("scene {s} has a view with too few foreground pixels")),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// `count` samples with seeds derived from `seed`, generated in parallel.
pub fn generate_dataset(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<DatasetSample>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| sample_scene(scene_seed(seed, i), cfg).map(|(s, _)| s))
        .collect()
}
