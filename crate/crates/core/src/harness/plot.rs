//! Static loss-curve rendering.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round();
        let y = (y0 + t * (y1 - y0)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Renders one polyline per series against epoch index, sharing a y range.
pub fn render_curves(series: &[(&[f64], Rgb<u8>)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (left, right) = (MARGIN as f64, (W - MARGIN) as f64);
    let (top, bottom) = (MARGIN as f64, (H - MARGIN) as f64);
    draw_line(&mut img, (left, bottom), (right, bottom), Rgb([0, 0, 0]));
    draw_line(&mut img, (left, top), (left, bottom), Rgb([0, 0, 0]));

    let finite = series.iter().flat_map(|(s, _)| s.iter()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = series.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    let x_at = |i: usize| left + (right - left) * i as f64 / (n.max(2) - 1) as f64;
    let y_at = |v: f64| bottom - (bottom - top) * (v - lo) / span;
    for (values, color) in series {
        for i in 1..values.len() {
            draw_line(&mut img, (x_at(i - 1), y_at(values[i - 1])), (x_at(i), y_at(values[i])), *color);
        }
        if values.len() == 1 {
            draw_line(&mut img, (x_at(0) - 2.0, y_at(values[0])), (x_at(0) + 2.0, y_at(values[0])), *color);
        }
    }
    img
}

/// Training MAE in blue and validation MAE in red.
pub fn write_loss_curve(path: impl AsRef<Path>, train: &[f64], val: &[f64]) -> Result<()> {
    render_curves(&[(train, Rgb([31, 119, 180])), (val, Rgb([214, 39, 40]))]).save(path)?;
    Ok(())
}
