//! Image quality metrics for images with dynamic range 1.

use crate::error::{dim_err, Result};
use crate::tensor::RealTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(x: &RealTensor, reference: &RealTensor) -> Result<()> {
    if x.shape() != reference.shape() {
        return Err(dim_err!("metric inputs differ in shape: {:?} vs {:?}", x.shape(), reference.shape()));
    }
    if x.is_empty() {
        return Err(dim_err!("metric of an empty image"));
    }
    Ok(())
}

pub fn mse(x: &RealTensor, reference: &RealTensor) -> Result<f64> {
    same_shape(x, reference)?;
    let s: f64 = x.data().iter().zip(reference.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.len() as f64)
}

pub fn mae(x: &RealTensor, reference: &RealTensor) -> Result<f64> {
    same_shape(x, reference)?;
    let s: f64 = x.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / x.len() as f64)
}

/// `10 log10(1 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(x: &RealTensor, reference: &RealTensor) -> Result<f64> {
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Normalised 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of a row-major image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, c)| c * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, c)| c * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over every position where the 11x11 Gaussian
/// window fits inside the image.
pub fn ssim(x: &RealTensor, reference: &RealTensor) -> Result<f64> {
    same_shape(x, reference)?;
    let (h, w) = x.dims2()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (a, b) = (x.data(), reference.data());
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(p, q)| p * q).collect();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&aa, h, w, &taps);
    let e_bb = filter_valid(&bb, h, w, &taps);
    let e_ab = filter_valid(&ab, h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for p in 0..mu_a.len() {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let va = e_aa[p] - ma * ma;
        let vb = e_bb[p] - mb * mb;
        let cov = e_ab[p] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let x = RealTensor::from_fn2(16, 16, |i, j| ((i * j) % 5) as f64 / 5.0);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_is_twenty_db() {
        let r = RealTensor::full(&[16, 16], 0.5);
        let x = RealTensor::full(&[16, 16], 0.6);
        assert!((psnr(&x, &r).unwrap() - 20.0).abs() < 1e-9);
        assert!((mae(&x, &r).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
        assert!(t[5] > t[4]);
    }

    #[test]
    fn errors() {
        assert!(ssim(&RealTensor::zeros(&[8, 8]), &RealTensor::zeros(&[8, 8])).is_err());
        assert!(psnr(&RealTensor::zeros(&[8, 8]), &RealTensor::zeros(&[8, 4])).is_err());
    }
}
