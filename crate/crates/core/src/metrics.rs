//! Image quality metrics on `[0, 1]` RGB images.

use crate::error::{Error, Result};
use crate::geometry::Grid;

pub type ColorImage = Grid<[f64; 3]>;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &ColorImage, b: &ColorImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "images are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_shapes(a, b)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.len()) as f64)
}

/// Peak signal-to-noise ratio in dB for unit-range images; `+inf` when equal.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of a single-channel plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut horiz = vec![0.0; ow * height];
    for row in 0..height {
        for col in 0..ow {
            let base = row * width + col;
            horiz[row * ow + col] = (0..SSIM_WINDOW).map(|k| w[k] * plane[base + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for row in 0..oh {
        for col in 0..ow {
            out[row * ow + col] = (0..SSIM_WINDOW).map(|k| w[k] * horiz[(row + k) * ow + col]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows and channels.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let (width, height) = (a.width, a.height);
    let w = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().map(|p| p[ch]).collect();
        let y: Vec<f64> = b.data.iter().map(|p| p[ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, width, height, &w);
        let my = filter_valid(&y, width, height, &w);
        let sxx = filter_valid(&xx, width, height, &w);
        let syy = filter_valid(&yy, width, height, &w);
        let sxy = filter_valid(&xy, width, height, &w);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
