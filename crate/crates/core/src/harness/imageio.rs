//! 8-bit grayscale PNG input and output.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::Result;
use crate::tensor::RealTensor;

/// Loads any PNG as grayscale with values in `[0, 1]`.
pub fn read_gray_png(path: impl AsRef<Path>) -> Result<RealTensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    RealTensor::new(vec![h as usize, w as usize], data)
}

/// Quantises `[0, 1]` values (clamped) to 8 bits.
pub fn to_gray_image(img: &RealTensor) -> Result<GrayImage> {
    let (h, w) = img.dims2()?;
    let mut out = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (img.get2(i, j).clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(j as u32, i as u32, Luma([v]));
        }
    }
    Ok(out)
}

pub fn write_gray_png(path: impl AsRef<Path>, img: &RealTensor) -> Result<()> {
    to_gray_image(img)?.save(path)?;
    Ok(())
}

/// Centre-crops or zero-pads to `height x width`.
pub fn fit_to(img: &RealTensor, height: usize, width: usize) -> Result<RealTensor> {
    let (h, w) = img.dims2()?;
    let off = |src: usize, dst: usize| (src as isize - dst as isize) / 2;
    let (oi, oj) = (off(h, height), off(w, width));
    Ok(RealTensor::from_fn2(height, width, |i, j| {
        let si = i as isize + oi;
        let sj = j as isize + oj;
        if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
            img.get2(si as usize, sj as usize)
        } else {
            0.0
        }
    }))
}
