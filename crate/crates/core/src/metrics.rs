//! PSNR and single-scale SSIM for images in [0,1]. Accumulation runs in
//! f64 regardless of the tensor dtype; both metrics are pure functions.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// PSNR cap applied when the MSE underflows 1e-10.
pub const PSNR_CAP: f64 = 100.0;

/// 10·log10(1/MSE) for unit-range images, capped at 100 dB.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> f64 {
    assert_eq!(pred.shape(), target.shape(), "psnr: shape mismatch");
    let mut sum = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.to_f64() - t.to_f64();
        sum += d * d;
    }
    let mse = sum / pred.numel() as f64;
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (0.01)^2 for unit range
const SSIM_C2: f64 = 9e-4; // (0.03)^2

fn gaussian_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let mut w = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    w
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), evaluated at every
/// position where the window fits, averaged over positions and channels.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { ctx: "ssim", lhs: a.shape(), rhs: b.shape() });
    }
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::InvalidArg(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s.h, s.w
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for n in 0..s.n {
        for ch in 0..s.c {
            for i in 0..=(s.h - SSIM_WINDOW) {
                for j in 0..=(s.w - SSIM_WINDOW) {
                    let (mut mx, mut my) = (0.0f64, 0.0f64);
                    let (mut xx, mut yy, mut xy) = (0.0f64, 0.0f64, 0.0f64);
                    for (u, row) in win.iter().enumerate() {
                        for (v, &w) in row.iter().enumerate() {
                            let xv = a.at(n, ch, i + u, j + v).to_f64();
                            let yv = b.at(n, ch, i + u, j + v).to_f64();
                            mx += w * xv;
                            my += w * yv;
                            xx += w * xv * xv;
                            yy += w * yv * yv;
                            xy += w * xv * yv;
                        }
                    }
                    let vx = xx - mx * mx;
                    let vy = yy - my * my;
                    let cov = xy - mx * my;
                    let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
                    let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                    total += num / den;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}
