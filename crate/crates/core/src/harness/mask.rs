//! 1D Gaussian random undersampling masks.
//!
//! A mask selects whole k-space columns. Columns are stored in the unshifted
//! DFT order, so column `j` holds frequency `j` for `j < W/2` and `j - W`
//! otherwise. Masks are conjugate-symmetric (frequency `f` is sampled iff
//! `-f` is), which keeps the inverse transform of real-image measurements
//! real. The DC neighbourhood is always sampled; the remaining columns are
//! drawn in `(f, -f)` pairs without replacement, with weight
//! `exp(-f^2 / (2 s^2))`, `s = W / 6`.

use num_complex::Complex64;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, Result};
use crate::fft;
use crate::tensor::{ComplexTensor, RealTensor};

pub const DEFAULT_CENTER_FRACTION: f64 = 0.04;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    columns: Vec<bool>,
    reduction: f64,
    seed: u64,
    center_fraction: f64,
}

/// Signed frequency of an unshifted column index.
pub fn column_frequency(col: usize, width: usize) -> isize {
    if col < width.div_ceil(2) {
        col as isize
    } else {
        col as isize - width as isize
    }
}

/// Unshifted column index of a signed frequency.
pub fn frequency_column(f: isize, width: usize) -> usize {
    f.rem_euclid(width as isize) as usize
}

/// Relative sampling weight of frequency `f`.
pub fn column_weight(f: isize, width: usize) -> f64 {
    let s = width as f64 / 6.0;
    let d = f as f64;
    (-d * d / (2.0 * s * s)).exp()
}

/// Draws `k` distinct items with probability proportional to `weights`, one
/// at a time without replacement.
pub fn weighted_draw(rng: &mut impl Rng, items: &[isize], weights: &[f64], k: usize) -> Result<Vec<isize>> {
    if items.len() != weights.len() {
        return Err(dim_err!("{} items but {} weights", items.len(), weights.len()));
    }
    let indexed: Vec<usize> = (0..items.len()).collect();
    let chosen = indexed
        .choose_multiple_weighted(rng, k.min(items.len()), |&i| weights[i])
        .map_err(|e| config_err!("weighted sampling failed: {e}"))?;
    Ok(chosen.map(|&i| items[i]).collect())
}

impl SamplingMask {
    pub fn from_columns(columns: Vec<bool>) -> Result<Self> {
        if columns.is_empty() {
            return Err(dim_err!("mask needs at least one column"));
        }
        let sampled = columns.iter().filter(|&&c| c).count();
        let reduction = if sampled == 0 { f64::INFINITY } else { columns.len() as f64 / sampled as f64 };
        Ok(Self { columns, reduction, seed: 0, center_fraction: 0.0 })
    }

    pub fn full(width: usize) -> Self {
        Self { columns: vec![true; width], reduction: 1.0, seed: 0, center_fraction: 1.0 }
    }

    pub fn empty(width: usize) -> Self {
        Self { columns: vec![false; width], reduction: f64::INFINITY, seed: 0, center_fraction: 0.0 }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    /// Requested reduction factor.
    pub fn reduction(&self) -> f64 {
        self.reduction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    pub fn num_sampled(&self) -> usize {
        self.columns.iter().filter(|&&c| c).count()
    }

    /// `W / #sampled`.
    pub fn achieved_reduction(&self) -> f64 {
        self.width() as f64 / self.num_sampled() as f64
    }

    pub fn is_full(&self) -> bool {
        self.columns.iter().all(|&c| c)
    }

    /// True when frequency `f` is sampled exactly when `-f` is.
    pub fn is_conjugate_symmetric(&self) -> bool {
        let w = self.width();
        (0..w).all(|j| self.columns[j] == self.columns[frequency_column(-column_frequency(j, w), w)])
    }

    /// Row-major `height x width` sampled flags.
    pub fn expand(&self, height: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(height * self.width());
        for _ in 0..height {
            out.extend_from_slice(&self.columns);
        }
        out
    }

    /// `[W]` tensor of 0/1 values in unshifted column order.
    pub fn to_tensor(&self) -> RealTensor {
        RealTensor::from_parts(
            vec![self.width()],
            self.columns.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn from_tensor(t: &RealTensor) -> Result<Self> {
        let cols: Vec<bool> = match t.shape() {
            [_] => t.data().iter().map(|&v| v > 0.5).collect(),
            [_, w] => t.data()[..*w].iter().map(|&v| v > 0.5).collect(),
            s => return Err(dim_err!("mask tensor must be rank 1 or 2, got {s:?}")),
        };
        Self::from_columns(cols)
    }

    /// Centred (DC in the middle) `height x width` image for display.
    pub fn centered_image(&self, height: usize) -> RealTensor {
        let w = self.width();
        let shift = w / 2;
        RealTensor::from_fn2(height, w, |_, j| {
            let src = (j + w - shift) % w;
            if self.columns[src] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Generates a conjugate-symmetric 1D Gaussian random column mask with
/// exactly `round(W / R)` sampled columns.
pub fn gaussian1d_mask(width: usize, reduction: f64, center_fraction: f64, seed: u64) -> Result<SamplingMask> {
    if width == 0 {
        return Err(config_err!("mask width must be positive"));
    }
    if !reduction.is_finite() || reduction < 1.0 {
        return Err(config_err!("reduction factor {reduction} must be >= 1"));
    }
    if !(0.0..=1.0).contains(&center_fraction) {
        return Err(config_err!("center fraction {center_fraction} outside [0, 1]"));
    }
    if reduction == 1.0 {
        let mut m = SamplingMask::full(width);
        m.seed = seed;
        m.center_fraction = center_fraction;
        return Ok(m);
    }
    let target = ((width as f64 / reduction).round() as usize).max(1);
    let mut center = (center_fraction * width as f64).round() as usize;
    if center > 0 && center % 2 == 0 {
        // odd band centred on DC keeps the mask symmetric
        center += 1;
    }
    if center > target {
        return Err(config_err!(
            "center band of {center} columns exceeds the {target} columns allowed by R={reduction}"
        ));
    }

    let mut columns = vec![false; width];
    let half = (center as isize - 1) / 2;
    if center > 0 {
        for f in -half..=half {
            columns[frequency_column(f, width)] = true;
        }
    }
    let mut remaining = target - center;

    let nyquist = width % 2 == 0;
    let max_pair = if nyquist { width as isize / 2 - 1 } else { (width as isize - 1) / 2 };
    let first_pair = if center > 0 { half + 1 } else { 1 };
    let mut candidates: Vec<isize> = (first_pair..=max_pair).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if remaining % 2 == 1 {
        if !columns[0] {
            columns[0] = true;
        } else if nyquist {
            columns[width / 2] = true;
        } else if let Some(pos) = candidates.first().copied() {
            // odd width with an even target: one unpaired column
            columns[frequency_column(pos, width)] = true;
            candidates.remove(0);
        }
        remaining -= 1;
    }
    let weights: Vec<f64> = candidates.iter().map(|&f| column_weight(f, width)).collect();
    for f in weighted_draw(&mut rng, &candidates, &weights, remaining / 2)? {
        columns[frequency_column(f, width)] = true;
        columns[frequency_column(-f, width)] = true;
    }
    Ok(SamplingMask { columns, reduction, seed, center_fraction })
}

fn check_geometry(shape: &[usize], mask: &SamplingMask) -> Result<(usize, usize)> {
    match shape {
        &[h, w] if w == mask.width() => Ok((h, w)),
        s => Err(dim_err!("shape {s:?} incompatible with a {}-column mask", mask.width())),
    }
}

/// Zeroes every coefficient outside the mask.
pub fn apply_mask(k: &ComplexTensor, mask: &SamplingMask) -> Result<ComplexTensor> {
    let (_, w) = check_geometry(k.shape(), mask)?;
    let mut out = k.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !mask.columns[i % w] {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    Ok(out)
}

/// Measured k-space `mask * dft2(img)`.
pub fn undersample(img: &RealTensor, mask: &SamplingMask) -> Result<ComplexTensor> {
    check_geometry(img.shape(), mask)?;
    apply_mask(&fft::dft2_real(img)?, mask)
}
