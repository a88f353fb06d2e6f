//! Image collections: synthetic phantoms or a directory on disk.

use std::path::{Path, PathBuf};

use crate::error::{config_err, Error, Result};
use crate::harness::imageio::{fit_to, read_gray_png};
use crate::harness::phantom::phantom_generate;
use crate::tensor::{load_any_real, RealTensor};

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Runs `f` over `0..n` on up to `threads` scoped workers, keeping index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `count` phantoms with seeds `seed, seed + 1, ...`.
pub fn synthetic(count: usize, height: usize, width: usize, seed: u64, threads: usize) -> Result<Vec<RealTensor>> {
    parallel_map(count, threads, |i| Ok(phantom_generate(height, width, seed.wrapping_add(i as u64))?.image))
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ktns")
    )
}

/// Sorted `.png` / `.ktns` files directly inside `dir`.
pub fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(config_err!("dataset directory {} does not exist", dir.display()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(config_err!("no .png or .ktns images in {}", dir.display()));
    }
    Ok(files)
}

/// Loads one image. PNGs are fitted to `height x width`; tensors must already match.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<RealTensor> {
    let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return fit_to(&read_gray_png(path)?, height, width);
    }
    let t = load_any_real(path)?;
    if t.shape() != [height, width] {
        return Err(Error::Config(format!(
            "{} has shape {:?}, expected [{height}, {width}]",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

pub fn load_dir(dir: &Path, height: usize, width: usize, threads: usize) -> Result<Vec<RealTensor>> {
    let files = list_dir(dir)?;
    parallel_map(files.len(), threads, |i| load_image(&files[i], height, width))
}

/// Writes `img_00000.ktns`, `img_00001.ktns`, ...
pub fn save_dir(images: &[RealTensor], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, img) in images.iter().enumerate() {
        img.save(dir.join(format!("img_{i:05}.ktns")))?;
    }
    Ok(())
}

/// Sizes of a contiguous train/val/test split; test takes the remainder.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config_err!("split fractions {fractions:?} must be in [0, 1] and sum to 1"));
    }
    let train = (fractions[0] * n as f64).round() as usize;
    let val = ((fractions[1] * n as f64).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<RealTensor>,
    pub val: Vec<RealTensor>,
    pub test: Vec<RealTensor>,
}

pub fn split(mut images: Vec<RealTensor>, fractions: [f64; 3]) -> Result<Split> {
    let [a, b, _] = split_sizes(images.len(), fractions)?;
    let test = images.split_off(a + b);
    let val = images.split_off(a);
    Ok(Split { train: images, val, test })
}
