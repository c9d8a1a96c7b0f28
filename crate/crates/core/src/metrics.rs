//! PSNR, SSIM and image-level CIEDE2000 on display images in [0,1].

use serde::{Deserialize, Serialize};

use crate::colorimetry::{delta_e_2000, display_to_lab};
use crate::image::Image;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e00: f64,
}

impl MetricReport {
    pub fn compute(pred: &Image, target: &Image) -> Result<Self> {
        Ok(Self { psnr: psnr(pred, target)?, ssim: ssim(pred, target)?, delta_e00: delta_e_image(pred, target)? })
    }

    /// Componentwise mean. Infinite PSNRs propagate.
    pub fn mean(reports: &[Self]) -> Self {
        let n = reports.len().max(1) as f64;
        Self {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            delta_e00: reports.iter().map(|r| r.delta_e00).sum::<f64>() / n,
        }
    }
}

pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    x.same_dims(y)?;
    let sum: f64 = x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    Ok(sum / x.data().len() as f64)
}

/// Peak signal-to-noise ratio with peak 1. Identical images give `f64::INFINITY`.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

fn luma(img: &Image) -> Vec<f64> {
    img.pixels().map(|[r, g, b]| 0.2126 * r as f64 + 0.7152 * g as f64 + 0.0722 * b as f64).collect()
}

pub fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the 1-D kernel `k` along both axes.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (wo, ho) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; wo * h];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows of the Rec.709 luma.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.same_dims(y)?;
    let (w, h) = x.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Contract(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let (lx, ly) = (luma(x), luma(y));
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&lx, w, h, &k);
    let my = filter_valid(&ly, w, h, &k);
    let mxx = filter_valid(&prod(&lx, &lx), w, h, &k);
    let myy = filter_valid(&prod(&ly, &ly), w, h, &k);
    let mxy = filter_valid(&prod(&lx, &ly), w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Mean per-pixel CIEDE2000 between two display images.
pub fn delta_e_image(x: &Image, y: &Image) -> Result<f64> {
    x.same_dims(y)?;
    let to = |p: [f32; 3]| display_to_lab(p.map(|v| v.clamp(0.0, 1.0) as f64));
    let total: f64 = x.pixels().zip(y.pixels()).map(|(a, b)| delta_e_2000(to(a), to(b))).sum();
    Ok(total / (x.width() * x.height()) as f64)
}
