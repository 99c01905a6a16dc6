//! PSNR and SSIM.
//!
//! Default evaluation quantizes to 8 bits first (the common convention for
//! published de-raining numbers); a float mode evaluates directly on [0,1].
//! SSIM follows the standard constants: 11x11 Gaussian window with sigma 1.5,
//! k1 = 0.01, k2 = 0.03, computed on luminance over valid window positions.

use crate::tensor::Tensor;
use crate::{Error, Result};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// 10*log10(peak^2 / MSE); +inf when the images are identical.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "psnr: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut se = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        se += d * d;
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn to_luma(img: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = img.chw();
    assert_eq!(c, 3);
    let mut out = vec![0.0; h * w];
    for (i, o) in out.iter_mut().enumerate() {
        *o = LUMA[0] * img.data()[i]
            + LUMA[1] * img.data()[h * w + i]
            + LUMA[2] * img.data()[2 * h * w + i];
    }
    Tensor::from_vec(&[h, w], out)
}

fn quantize(img: &Tensor<f64>) -> Tensor<f64> {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n / 2) as isize;
    let mut w: Vec<f64> = (-half..=half)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean local SSIM on luminance over valid window positions; value in [-1,1].
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "ssim: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let la = to_luma(a);
    let lb = to_luma(b);
    let (h, w) = (la.shape()[0], la.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (K1 * 1.0) * (K1 * 1.0);
    let c2 = (K2 * 1.0) * (K2 * 1.0);
    let va = la.data();
    let vb = lb.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy] * win[dx];
                    let pa = va[(y0 + dy) * w + x0 + dx];
                    let pb = vb[(y0 + dy) * w + x0 + dx];
                    mu_a += wgt * pa;
                    mu_b += wgt * pb;
                    aa += wgt * pa * pa;
                    bb += wgt * pb * pb;
                    ab += wgt * pa * pb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Metric evaluation mode.
#[derive(Debug, Clone, Copy)]
pub struct MetricMode {
    /// Quantize to 8 bits before measuring (default true).
    pub eight_bit: bool,
    /// PSNR on luminance instead of RGB.
    pub luminance_psnr: bool,
}

impl Default for MetricMode {
    fn default() -> Self {
        MetricMode {
            eight_bit: true,
            luminance_psnr: false,
        }
    }
}

pub fn psnr_with_mode(a: &Tensor<f64>, b: &Tensor<f64>, mode: MetricMode) -> Result<f64> {
    let (pa, pb) = if mode.eight_bit {
        (quantize(a), quantize(b))
    } else {
        (a.clone(), b.clone())
    };
    if mode.luminance_psnr {
        psnr(&to_luma(&pa), &to_luma(&pb), 1.0)
    } else {
        psnr(&pa, &pb, 1.0)
    }
}

pub fn ssim_with_mode(a: &Tensor<f64>, b: &Tensor<f64>, mode: MetricMode) -> Result<f64> {
    if mode.eight_bit {
        ssim(&quantize(a), &quantize(b))
    } else {
        ssim(a, b)
    }
}
