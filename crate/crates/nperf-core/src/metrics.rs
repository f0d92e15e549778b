//! Image quality metrics on [0, 1] float images.
//!
//! Metrics always run on float data before any quantization; quantized files
//! are for viewing. PSNR of identical images reports infinity. SSIM follows
//! the standard formulation: 11x11 Gaussian window (sigma 1.5), C1 =
//! (0.01 L)^2, C2 = (0.03 L)^2, L = 1, averaged over channels and window
//! positions with windows fully inside the raster. Rasters smaller than the
//! window fall back to a single uniform full-image window.

use crate::error::{Error, Result};
use crate::scene::Mask2D;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Full-image and masked-region quality numbers for one image pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_masked: Option<f64>,
    pub ssim_masked: Option<f64>,
}

fn check_shapes(a: &[[f64; 3]], b: &[[f64; 3]], width: u32, height: u32) -> Result<()> {
    let n = (width as usize) * (height as usize);
    if a.len() != n || b.len() != n {
        return Err(Error::invalid("image raster size mismatch"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak 1.0; infinity for identical
/// inputs.
pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mut mse = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            mse += d * d;
        }
    }
    mse /= (a.len() * 3) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR restricted to masked pixels. `None` when the mask is empty.
pub fn psnr_masked(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    width: u32,
    mask: &Mask2D,
) -> Option<f64> {
    let mut mse = 0.0;
    let mut count = 0usize;
    for (u, v) in mask.pixels() {
        let i = (v as usize) * (width as usize) + u as usize;
        for c in 0..3 {
            let d = a[i][c] - b[i][c];
            mse += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return None;
    }
    mse /= count as f64;
    Some(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_kernel(win: usize, sigma: f64) -> Vec<f64> {
    let c = (win as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..win * win)
        .map(|i| {
            let x = (i % win) as f64 - c;
            let y = (i / win) as f64 - c;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

fn ssim_at(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    width: usize,
    x0: usize,
    y0: usize,
    win: usize,
    kernel: &[f64],
) -> f64 {
    let mut total = 0.0;
    for ch in 0..3 {
        let (mut mu_a, mut mu_b) = (0.0, 0.0);
        for wy in 0..win {
            for wx in 0..win {
                let w = kernel[wy * win + wx];
                let i = (y0 + wy) * width + x0 + wx;
                mu_a += w * a[i][ch];
                mu_b += w * b[i][ch];
            }
        }
        let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
        for wy in 0..win {
            for wx in 0..win {
                let w = kernel[wy * win + wx];
                let i = (y0 + wy) * width + x0 + wx;
                let da = a[i][ch] - mu_a;
                let db = b[i][ch] - mu_b;
                var_a += w * da * da;
                var_b += w * db * db;
                cov += w * da * db;
            }
        }
        total += ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
            / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
    }
    total / 3.0
}

/// Structural similarity averaged over all valid window positions.
pub fn ssim(a: &[[f64; 3]], b: &[[f64; 3]], width: u32, height: u32) -> Result<f64> {
    check_shapes(a, b, width, height)?;
    let (w, h) = (width as usize, height as usize);
    let win = SSIM_WINDOW.min(w).min(h);
    let kernel = if win == SSIM_WINDOW {
        gaussian_kernel(win, SSIM_SIGMA)
    } else {
        vec![1.0 / (win * win) as f64; win * win]
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - win) {
        for x0 in 0..=(w - win) {
            total += ssim_at(a, b, w, x0, y0, win, &kernel);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM averaged over windows centered on masked pixels (windows clamped to
/// stay inside the raster). `None` when the mask is empty.
pub fn ssim_masked(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    width: u32,
    height: u32,
    mask: &Mask2D,
) -> Result<Option<f64>> {
    check_shapes(a, b, width, height)?;
    let (w, h) = (width as usize, height as usize);
    let win = SSIM_WINDOW.min(w).min(h);
    let kernel = if win == SSIM_WINDOW {
        gaussian_kernel(win, SSIM_SIGMA)
    } else {
        vec![1.0 / (win * win) as f64; win * win]
    };
    let half = win / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for (u, v) in mask.pixels() {
        let x0 = (u as usize).saturating_sub(half).min(w - win);
        let y0 = (v as usize).saturating_sub(half).min(h - win);
        total += ssim_at(a, b, w, x0, y0, win, &kernel);
        count += 1;
    }
    Ok(if count == 0 { None } else { Some(total / count as f64) })
}

/// All metrics for one image pair, with masked variants when a mask is given.
pub fn image_metrics(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    width: u32,
    height: u32,
    mask: Option<&Mask2D>,
) -> Result<ImageMetrics> {
    check_shapes(a, b, width, height)?;
    let psnr_full = psnr(a, b);
    let ssim_full = ssim(a, b, width, height)?;
    let (pm, sm) = match mask {
        Some(m) => (
            psnr_masked(a, b, width, m),
            ssim_masked(a, b, width, height, m)?,
        ),
        None => (None, None),
    };
    Ok(ImageMetrics { psnr: psnr_full, ssim: ssim_full, psnr_masked: pm, ssim_masked: sm })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_image(n: usize, v: f64) -> Vec<[f64; 3]> {
        vec![[v, v, v]; n]
    }

    #[test]
    fn identical_images_sentinel() {
        let img = constant_image(64, 0.42);
        assert_eq!(psnr(&img, &img), f64::INFINITY);
        let s = ssim(&img, &img, 8, 8).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_20db_for_mse_001() {
        // 8x8 pair with uniform squared error 0.01 -> exactly 20 dB.
        let a = constant_image(64, 0.5);
        let b = constant_image(64, 0.6);
        let p = psnr(&a, &b);
        assert!((p - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_nonnegative_for_unit_range() {
        let a = constant_image(16, 0.0);
        let b = constant_image(16, 1.0);
        assert!(psnr(&a, &b) >= 0.0);
    }

    #[test]
    fn ssim_constant_offset_matches_analytic() {
        // Constant images a and b = a + 0.1: variances vanish, so
        // SSIM = (2ab + C1)/(a^2 + b^2 + C1) * (C2)/(C2) exactly.
        let a = constant_image(20 * 20, 0.4);
        let b = constant_image(20 * 20, 0.5);
        let got = ssim(&a, &b, 20, 20).unwrap();
        let want = (2.0 * 0.4 * 0.5 + C1) / (0.4 * 0.4 + 0.5 * 0.5 + C1);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_in_valid_range() {
        let mut a = constant_image(16 * 16, 0.2);
        let mut b = constant_image(16 * 16, 0.8);
        for i in 0..a.len() {
            a[i][0] = (i % 7) as f64 / 7.0;
            b[i][2] = (i % 5) as f64 / 5.0;
        }
        let s = ssim(&a, &b, 16, 16).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn masked_metrics_differ_from_full() {
        let n = 16 * 16;
        let a = constant_image(n, 0.5);
        let mut b = constant_image(n, 0.5);
        // Corrupt only the masked quadrant.
        let mask = Mask2D::from_pixels(16, 16, (0..8u32).flat_map(|v| (0..8u32).map(move |u| (u, v))))
            .unwrap();
        for (u, v) in mask.pixels() {
            b[(v as usize) * 16 + u as usize] = [0.9, 0.9, 0.9];
        }
        let m = image_metrics(&a, &b, 16, 16, Some(&mask)).unwrap();
        let masked_psnr = m.psnr_masked.unwrap();
        assert!(masked_psnr < m.psnr);
        // Full-image MSE is a quarter of the masked-region MSE.
        assert!((masked_psnr - (-10.0 * (0.4f64 * 0.4).log10())).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_yields_none() {
        let a = constant_image(64, 0.1);
        let m = Mask2D::empty(8, 8);
        let out = image_metrics(&a, &a, 8, 8, Some(&m)).unwrap();
        assert!(out.psnr_masked.is_none());
        assert!(out.ssim_masked.is_none());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = constant_image(64, 0.1);
        let b = constant_image(60, 0.1);
        assert!(image_metrics(&a, &b, 8, 8, None).is_err());
    }
}
