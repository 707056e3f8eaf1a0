//! PNG, PFM, camera JSON and dataset directories.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unproject_depth, Grid, Intrinsics, SE3Pose, ValidMask};
use crate::metrics::ColorImage;
use crate::synth::{DatasetSample, Mode};

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: impl AsRef<Path>, img: &ColorImage) -> Result<()> {
    let mut out = RgbImage::new(img.width as u32, img.height as u32);
    for (row, col, px) in out.enumerate_pixels_mut().map(|(c, r, p)| (r, c, p)) {
        *px = Rgb(img.get(row as usize, col as usize).map(to_u8));
    }
    out.save(path.as_ref())?;
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    Ok(reader.decode()?)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ColorImage> {
    let img = open_image(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(w, h, |row, col| {
        img.get_pixel(col as u32, row as u32).0.map(|v| v as f64 / 255.0)
    }))
}

pub fn write_mask_png(path: impl AsRef<Path>, mask: &ValidMask) -> Result<()> {
    let mut out = GrayImage::new(mask.width as u32, mask.height as u32);
    for (col, row, px) in out.enumerate_pixels_mut() {
        *px = Luma([if *mask.get(row as usize, col as usize) { 255 } else { 0 }]);
    }
    out.save(path.as_ref())?;
    Ok(())
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<ValidMask> {
    let img = open_image(path.as_ref())?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(w, h, |row, col| img.get_pixel(col as u32, row as u32).0[0] > 127))
}

/// Single-channel little-endian PFM (`Pf`, scale `-1.0`), rows stored bottom to top.
pub fn write_pfm_to<W: Write>(mut w: W, map: &Grid<f64>) -> std::io::Result<()> {
    write!(w, "Pf\n{} {}\n-1.0\n", map.width, map.height)?;
    let mut buf = Vec::with_capacity(map.len() * 4);
    for row in (0..map.height).rev() {
        for col in 0..map.width {
            buf.extend_from_slice(&(*map.get(row, col) as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

fn pfm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::format("PFM", e.to_string()))? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
        if tok.len() > 32 {
            return Err(Error::format("PFM", "header token too long"));
        }
    }
    String::from_utf8(tok).map_err(|_| Error::format("PFM", "non-ASCII header"))
}

pub fn read_pfm_from<R: BufRead>(mut r: R) -> Result<Grid<f64>> {
    let magic = pfm_token(&mut r)?;
    if magic != "Pf" {
        return Err(Error::format("PFM", format!("expected single-channel 'Pf', got '{magic}'")));
    }
    let parse = |s: String, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::format("PFM", format!("bad {what} '{s}'")))
    };
    let width = parse(pfm_token(&mut r)?, "width")?;
    let height = parse(pfm_token(&mut r)?, "height")?;
    let scale_tok = pfm_token(&mut r)?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::format("PFM", format!("bad scale '{scale_tok}'")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("PFM", "scale must be finite and non-zero"));
    }
    let little = scale < 0.0;
    let mut buf = vec![0u8; width * height * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format("PFM", "truncated payload"))?;
    let mut data = vec![0.0; width * height];
    for (k, chunk) in buf.chunks_exact(4).enumerate() {
        let bytes: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
        let (row, col) = (height - 1 - k / width, k % width);
        data[row * width + col] = v as f64;
    }
    Grid::from_vec(width, height, data)
}

pub fn write_pfm(path: impl AsRef<Path>, map: &Grid<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_pfm_to(std::io::BufWriter::new(file), map).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Grid<f64>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pfm_from(BufReader::new(file))
}

/// On-disk camera rig: shared focal length and row-major camera-to-reference matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub f: f64,
    pub width: usize,
    pub height: usize,
    pub poses: Vec<Vec<f64>>,
}

impl CameraFile {
    pub fn new(k: &Intrinsics, poses: &[SE3Pose]) -> CameraFile {
        CameraFile {
            f: k.focal,
            width: k.width,
            height: k.height,
            poses: poses.iter().map(|p| p.to_row_major().to_vec()).collect(),
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.f, self.width, self.height)
    }

    pub fn se3_poses(&self) -> Result<Vec<SE3Pose>> {
        self.poses.iter().map(|p| SE3Pose::from_row_major(p)).collect()
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_cameras(path: impl AsRef<Path>, k: &Intrinsics, poses: &[SE3Pose]) -> Result<()> {
    write_json(path, &CameraFile::new(k, poses))
}

pub fn read_cameras(path: impl AsRef<Path>) -> Result<(Intrinsics, Vec<SE3Pose>)> {
    let cams: CameraFile = read_json(path)?;
    Ok((cams.intrinsics()?, cams.se3_poses()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub mode: Mode,
    /// World-to-normalized scale factor.
    pub scale: f64,
    pub views: usize,
}

pub fn scene_dir(root: impl AsRef<Path>, id: usize) -> PathBuf {
    root.as_ref().join(format!("scene_{id:04}"))
}

pub fn view_image_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("view_{k}.png"))
}

/// Writes one sample as `view_<k>.png`, `view_<k>_depth.pfm`, `view_<k>_mask.png`,
/// `cameras.json` and `meta.json`.
pub fn write_sample(dir: impl AsRef<Path>, sample: &DatasetSample, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for k in 0..sample.views() {
        write_png(view_image_path(dir, k), &sample.images[k])?;
        write_pfm(dir.join(format!("view_{k}_depth.pfm")), &sample.depths[k])?;
        write_mask_png(dir.join(format!("view_{k}_mask.png")), &sample.masks[k])?;
    }
    write_cameras(dir.join("cameras.json"), &sample.intrinsics, &sample.poses)?;
    write_json(
        dir.join("meta.json"),
        &SceneMeta {
            seed,
            mode: sample.mode,
            scale: sample.scale,
            views: sample.views(),
        },
    )
}

/// Reads a sample back; point maps are recomputed from the stored depths.
pub fn read_sample(dir: impl AsRef<Path>) -> Result<(DatasetSample, SceneMeta)> {
    let dir = dir.as_ref();
    let meta: SceneMeta = read_json(dir.join("meta.json"))?;
    let (k, poses) = read_cameras(dir.join("cameras.json"))?;
    if poses.len() != meta.views {
        return Err(Error::format(
            "dataset",
            format!("{} poses for {} views", poses.len(), meta.views),
        ));
    }
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut masks = Vec::new();
    for v in 0..meta.views {
        images.push(read_png(view_image_path(dir, v))?);
        let mut depth = read_pfm(dir.join(format!("view_{v}_depth.pfm")))?;
        let mask = read_mask_png(dir.join(format!("view_{v}_mask.png")))?;
        for (d, &m) in depth.data.iter_mut().zip(&mask.data) {
            if !m {
                *d = 0.0;
            }
        }
        depths.push(depth);
        masks.push(mask);
    }
    let points = depths
        .iter()
        .zip(&poses)
        .zip(&masks)
        .map(|((d, p), m)| unproject_depth(d, &k, p, m))
        .collect::<Result<Vec<_>>>()?;
    let sample = DatasetSample {
        mode: meta.mode,
        intrinsics: k,
        images,
        depths,
        masks,
        points,
        poses,
        scale: meta.scale,
    };
    Ok((sample, meta))
}

/// All `scene_*` directories under `root`, sorted by name.
pub fn list_scenes(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}
