//! Full-reference image quality: PSNR and single-scale SSIM.

use crate::error::{Error, Result};
use crate::frame::RgbFrame;

/// Returned for identical images instead of +∞.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims(a: &RgbFrame, b: &RgbFrame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("image extents {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over all channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &RgbFrame, gt: &RgbFrame, peak: f64) -> Result<f64> {
    same_dims(pred, gt)?;
    let n = pred.data().len() as f64;
    let mse = pred.data().iter().zip(gt.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// ITU-R BT.601 luma.
pub fn luma(f: &RgbFrame) -> Vec<f64> {
    let (h, w) = f.dims();
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            0.299 * f.get(0, y, x) as f64 + 0.587 * f.get(1, y, x) as f64 + 0.114 * f.get(2, y, x) as f64
        })
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma planes over all full 11×11 Gaussian windows.
pub fn ssim(pred: &RgbFrame, gt: &RgbFrame) -> Result<f64> {
    same_dims(pred, gt)?;
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let (a, b) = (luma(pred), luma(gt));
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let e_aa = filter_valid(&prod(&a, &a), h, w, &k);
    let e_bb = filter_valid(&prod(&b, &b), h, w, &k);
    let e_ab = filter_valid(&prod(&a, &b), h, w, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}
