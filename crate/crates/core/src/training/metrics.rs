//! PSNR and windowed SSIM for images in [0,1].

use crate::scene::Image;
use crate::{Error, Result};

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::argument(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `10·log10(1/mse)` in decibels, pinned to 99 when `mse < 1e-10`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len();
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse < 1e-10 {
        Ok(99.0)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[((dy + r) * SSIM_WINDOW as isize + dx + r) as usize] = g;
            sum += g;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// standard constants for dynamic range 1, valid windows only, channels
/// averaged. Exactly 1 for identical images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::argument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            a.width, a.height
        )));
    }
    let window = gaussian_window();
    let c1 = 0.01_f64 * 0.01;
    let c2 = 0.03_f64 * 0.03;
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for channel in 0..3 {
        for cy in r..a.height - r {
            for cx in r..a.width - r {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                let mut wi = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let w = window[wi];
                        wi += 1;
                        let px = (cy - r + dy) * a.width + (cx - r + dx);
                        let xv = a.data()[px * 3 + channel];
                        let yv = b.data()[px * 3 + channel];
                        mx += w * xv;
                        my += w * yv;
                        sxx += w * xv * xv;
                        syy += w * yv * yv;
                        sxy += w * xv * yv;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let numerator = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                let denominator = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += numerator / denominator;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
