//! Synthetic piecewise-constant phantoms standing in for real MR slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::tensor::RealTensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, intensity: f64 },
    Rectangle { cx: f64, cy: f64, hx: f64, hy: f64, angle: f64, intensity: f64 },
}

impl Shape {
    /// Coordinates are normalised to `[-1, 1]` on both axes.
    fn contains(&self, x: f64, y: f64) -> bool {
        let rot = |cx: f64, cy: f64, angle: f64| {
            let (s, c) = angle.sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            (c * dx + s * dy, -s * dx + c * dy)
        };
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle, .. } => {
                let (u, v) = rot(cx, cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rectangle { cx, cy, hx, hy, angle, .. } => {
                let (u, v) = rot(cx, cy, angle);
                u.abs() <= hx && v.abs() <= hy
            }
        }
    }

    fn intensity(&self) -> f64 {
        match *self {
            Shape::Ellipse { intensity, .. } | Shape::Rectangle { intensity, .. } => intensity,
        }
    }
}

/// Coefficients of the multiplicative field `1 + a x + b y + c x y + d (x^2 + y^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasField {
    pub coeffs: [f64; 4],
}

impl BiasField {
    fn at(&self, x: f64, y: f64) -> f64 {
        let [a, b, c, d] = self.coeffs;
        1.0 + a * x + b * y + c * x * y + d * (x * x + y * y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: RealTensor,
    pub shapes: Vec<Shape>,
    pub bias: BiasField,
    pub seed: u64,
}

/// Draws 5 to 12 shapes (the first is a large outline ellipse), paints them
/// in order, applies a smooth bias field and rescales into `[0, 1]`.
pub fn phantom_generate(height: usize, width: usize, seed: u64) -> Result<Phantom> {
    if height < 16 || width < 16 {
        return Err(config_err!("phantoms need at least 16x16 pixels, got {height}x{width}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_shapes = rng.random_range(5..=12);
    let mut shapes = Vec::with_capacity(n_shapes);
    shapes.push(Shape::Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        rx: rng.random_range(0.7..0.9),
        ry: rng.random_range(0.75..0.95),
        angle: rng.random_range(-0.3..0.3),
        intensity: rng.random_range(0.3..0.6),
    });
    for _ in 1..n_shapes {
        let cx = rng.random_range(-0.5..0.5);
        let cy = rng.random_range(-0.5..0.5);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let intensity = rng.random_range(0.0..1.0);
        let shape = if rng.random_bool(0.6) {
            Shape::Ellipse { cx, cy, rx: rng.random_range(0.06..0.35), ry: rng.random_range(0.06..0.35), angle, intensity }
        } else {
            Shape::Rectangle { cx, cy, hx: rng.random_range(0.05..0.25), hy: rng.random_range(0.05..0.25), angle, intensity }
        };
        shapes.push(shape);
    }
    let bias = BiasField { coeffs: std::array::from_fn(|_| rng.random_range(-0.15..0.15)) };

    let mut data = Vec::with_capacity(height * width);
    for i in 0..height {
        let y = 2.0 * (i as f64 + 0.5) / height as f64 - 1.0;
        for j in 0..width {
            let x = 2.0 * (j as f64 + 0.5) / width as f64 - 1.0;
            let mut v = 0.0;
            for s in &shapes {
                if s.contains(x, y) {
                    v = s.intensity();
                }
            }
            data.push(v * bias.at(x, y).max(0.0));
        }
    }
    let max = data.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        data.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(Phantom { image: RealTensor::from_parts(vec![height, width], data), shapes, bias, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = phantom_generate(32, 48, 4).unwrap();
        let b = phantom_generate(32, 48, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((5..=12).contains(&a.shapes.len()));
        assert!(a.image.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn different_seeds_differ() {
        let a = phantom_generate(64, 64, 1).unwrap().image;
        let b = phantom_generate(64, 64, 2).unwrap().image;
        let differing = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        assert!(differing as f64 >= 0.01 * a.len() as f64);
    }

    #[test]
    fn too_small() {
        assert!(phantom_generate(8, 64, 0).is_err());
    }
}
