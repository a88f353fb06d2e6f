//! Supervised training with Adam and test-set evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore};
use crate::error::{config_err, Error, Result};
use crate::harness::checkpoint;
use crate::harness::dataset::parallel_map;
use crate::harness::mask::{gaussian1d_mask, undersample, SamplingMask, DEFAULT_CENTER_FRACTION};
use crate::harness::metrics::{mae, psnr, ssim};
use crate::recon::{build_model, zero_filled, DcConfig, DcTnnModel};
use crate::tensor::{ComplexTensor, RealTensor};

pub const HISTORY_HEADER: &str = "epoch,train_mae,val_mae,val_psnr,val_ssim";
pub const METRICS_HEADER: &str = "r,n_images,psnr,ssim,mae,zf_psnr,zf_ssim,zf_mae";

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new() }
    }

    /// One bias-corrected update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        store.advance_step();
        let t = store.step() as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let value = Arc::make_mut(&mut p.value).data_mut();
            for k in 0..value.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                value[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mae,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: DcConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    /// Seeds parameter initialisation and batch shuffling.
    pub seed: u64,
    pub reduction: f64,
    pub center_fraction: f64,
    pub mask_seed: u64,
    /// Draw a separate mask for every image instead of one per run.
    pub per_image_masks: bool,
    /// Where the best-validation checkpoint is kept.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(model: DcConfig) -> Self {
        Self {
            model,
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-4,
            loss: LossKind::Mae,
            seed: 0,
            reduction: 4.0,
            center_fraction: DEFAULT_CENTER_FRACTION,
            mask_seed: 0,
            per_image_masks: false,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        gaussian1d_mask(self.model.width, self.reduction, self.center_fraction, self.mask_seed)?;
        Ok(())
    }

    /// The run's shared mask.
    pub fn mask(&self) -> Result<SamplingMask> {
        gaussian1d_mask(self.model.width, self.reduction, self.center_fraction, self.mask_seed)
    }

    /// Mask used for image `i` (training images first, then validation).
    pub fn mask_for(&self, i: usize) -> Result<SamplingMask> {
        if !self.per_image_masks {
            return self.mask();
        }
        let seed = self.mask_seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        gaussian1d_mask(self.model.width, self.reduction, self.center_fraction, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            writeln!(s, "{},{},{},{},{}", r.epoch, r.train_mae, r.val_mae, r.val_psnr, r.val_ssim).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn train_mae(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_mae).collect()
    }

    pub fn val_mae(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_mae).collect()
    }
}

/// Trailing moving average over full windows only.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: DcTnnModel,
    /// Parameters with the lowest validation MAE (the initial model when no
    /// epoch improved on it or no validation set was given).
    pub best: DcTnnModel,
    pub best_epoch: usize,
    pub history: History,
    pub mask: SamplingMask,
}

struct Sample {
    y: Arc<ComplexTensor>,
    sampled: Arc<Vec<bool>>,
}

fn prepare(config: &TrainConfig, images: &[RealTensor], offset: usize) -> Result<Vec<Sample>> {
    let (h, w) = (config.model.height, config.model.width);
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            if img.shape() != [h, w] {
                return Err(config_err!("image {} has shape {:?}, model expects [{h}, {w}]", offset + i, img.shape()));
            }
            let mask = config.mask_for(offset + i)?;
            Ok(Sample { y: Arc::new(undersample(img, &mask)?), sampled: Arc::new(mask.expand(h)) })
        })
        .collect()
}

fn predict(model: &DcTnnModel, s: &Sample) -> Result<RealTensor> {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &s.y, &s.sampled)?;
    Ok(g.value(out)?.clone())
}

fn validation(model: &DcTnnModel, samples: &[Sample], images: &[RealTensor]) -> Result<(f64, f64, f64)> {
    if images.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let (mut a, mut p, mut s) = (0.0, 0.0, 0.0);
    for (sample, img) in samples.iter().zip(images) {
        let x = predict(model, sample)?;
        a += mae(&x, img)?;
        p += psnr(&x, img)?;
        s += ssim(&x, img)?;
    }
    let n = images.len() as f64;
    Ok((a / n, p / n, s / n))
}

/// Minimises the MAE between the cascade output and the ground truth.
///
/// Gradients are accumulated image by image in batch order, so results are
/// bitwise reproducible for a fixed seed.
pub fn train(config: &TrainConfig, train_set: &[RealTensor], val_set: &[RealTensor]) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    let train_samples = prepare(config, train_set, 0)?;
    let val_samples = prepare(config, val_set, train_set.len())?;
    let mut model = build_model(&config.model, config.seed)?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let (mut best_val, _, _) = validation(&model, &val_samples, val_set)?;
    if let Some(dir) = &config.checkpoint_dir {
        checkpoint::save(&best, dir)?;
    }

    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.store.zero_grads();
            for &i in batch {
                let mut g = Graph::new();
                let out = model.forward_graph(&mut g, &train_samples[i].y, &train_samples[i].sampled)?;
                let target = g.constant(train_set[i].clone());
                let loss = match config.loss {
                    LossKind::Mae => g.mae(out, target)?,
                };
                let value = g.value(loss)?.data()[0];
                if !value.is_finite() {
                    return Err(abort(config, epoch, model.store.step(), i, value));
                }
                loss_sum += value;
                let scaled = g.scale(loss, 1.0 / batch.len() as f64)?;
                g.backward(scaled, &mut model.store)?;
            }
            if let Some((name, _)) = model.store.iter().find(|(_, p)| !p.grad.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {name} at epoch {epoch}, step {}; {}",
                    model.store.step(),
                    retained(config)
                )));
            }
            adam.step(&mut model.store);
        }
        let (val_mae, val_psnr, val_ssim) = validation(&model, &val_samples, val_set)?;
        history.records.push(EpochRecord {
            epoch,
            train_mae: loss_sum / train_set.len() as f64,
            val_mae,
            val_psnr,
            val_ssim,
        });
        if val_set.is_empty() || val_mae < best_val {
            best_val = val_mae;
            best = model.clone();
            best_epoch = epoch;
            if let Some(dir) = &config.checkpoint_dir {
                checkpoint::save(&best, dir)?;
            }
        }
    }
    Ok(TrainOutcome { model, best, best_epoch, history, mask: config.mask()? })
}

fn retained(config: &TrainConfig) -> String {
    match &config.checkpoint_dir {
        Some(d) => format!("last good checkpoint kept at {}", d.display()),
        None => "no checkpoint directory configured".to_string(),
    }
}

fn abort(config: &TrainConfig, epoch: usize, step: u64, image: usize, value: f64) -> Error {
    Error::Numeric(format!(
        "training loss became {value} at epoch {epoch}, step {step}, training image {image} (lr {}); {}",
        config.learning_rate,
        retained(config)
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub zf_psnr: f64,
    pub zf_ssim: f64,
    pub zf_mae: f64,
}

/// Test-set means for one mask, alongside the zero-filled baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub reduction: f64,
    pub n_images: usize,
    pub mean: ImageMetrics,
    pub per_image: Vec<ImageMetrics>,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let m = &self.mean;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.reduction, self.n_images, m.psnr, m.ssim, m.mae, m.zf_psnr, m.zf_ssim, m.zf_mae
        )
    }
}

pub fn metrics_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in reports {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

pub fn evaluate(model: &DcTnnModel, images: &[RealTensor], mask: &SamplingMask, threads: usize) -> Result<EvalReport> {
    let (h, w) = (model.config().height, model.config().width);
    if mask.width() != w {
        return Err(config_err!("mask width {} does not match model width {w}", mask.width()));
    }
    if images.is_empty() {
        return Err(config_err!("evaluation set is empty"));
    }
    let sampled = Arc::new(mask.expand(h));
    let per_image = parallel_map(images.len(), threads, |i| {
        let img = &images[i];
        if img.shape() != [h, w] {
            return Err(config_err!("test image {i} has shape {:?}, model expects [{h}, {w}]", img.shape()));
        }
        let y = undersample(img, mask)?;
        let zf = zero_filled(&y, mask)?;
        let x = predict(model, &Sample { y: Arc::new(y), sampled: Arc::clone(&sampled) })?;
        Ok(ImageMetrics {
            psnr: psnr(&x, img)?,
            ssim: ssim(&x, img)?,
            mae: mae(&x, img)?,
            zf_psnr: psnr(&zf, img)?,
            zf_ssim: ssim(&zf, img)?,
            zf_mae: mae(&zf, img)?,
        })
    })?;
    let n = per_image.len() as f64;
    let avg = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let mean = ImageMetrics {
        psnr: avg(|m| m.psnr),
        ssim: avg(|m| m.ssim),
        mae: avg(|m| m.mae),
        zf_psnr: avg(|m| m.zf_psnr),
        zf_ssim: avg(|m| m.zf_ssim),
        zf_mae: avg(|m| m.zf_mae),
    };
    Ok(EvalReport { reduction: mask.reduction(), n_images: images.len(), mean, per_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::BlockKind;
    use crate::harness::dataset::synthetic;
    use crate::recon::{ArchConfig, LambdaMode};

    fn tiny(lambda_mode: LambdaMode) -> DcConfig {
        DcConfig {
            n_d: 2,
            kinds: vec![BlockKind::Kaleidoscope],
            lambda_mode,
            arch: ArchConfig { token_size: 4, d_model: 16, axial_d_model: 16, n_layers: 1, n_heads: 2, ff_mult: 2 },
            height: 16,
            width: 16,
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("p", RealTensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        store.iter_mut().next().unwrap().1.grad = RealTensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut store);
        let p = store.get("p").unwrap().data();
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 0.9).abs() < 1e-7);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let imgs = synthetic(4, 16, 16, 0, 1).unwrap();
        let mut cfg = TrainConfig::new(tiny(LambdaMode::Learnable { init: 1.0 }));
        cfg.epochs = 1;
        cfg.learning_rate = 0.0;
        cfg.batch_size = 2;
        let out = train(&cfg, &imgs[..3], &imgs[3..]).unwrap();
        let init = build_model(&cfg.model, cfg.seed).unwrap();
        for (name, p) in init.store.iter() {
            assert_eq!(out.model.store.get(name).unwrap(), p.value.as_ref(), "{name}");
        }
        assert_eq!(out.history.records.len(), 1);
    }

    #[test]
    fn history_rows_match_epochs_and_reproducible() {
        let imgs = synthetic(5, 16, 16, 1, 1).unwrap();
        let mut cfg = TrainConfig::new(tiny(LambdaMode::Learnable { init: 1.0 }));
        cfg.epochs = 3;
        cfg.learning_rate = 1e-3;
        let a = train(&cfg, &imgs[..4], &imgs[4..]).unwrap();
        let b = train(&cfg, &imgs[..4], &imgs[4..]).unwrap();
        assert_eq!(a.history, b.history);
        let csv = a.history.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap(), HISTORY_HEADER);
        for (name, p) in a.model.store.iter() {
            assert_eq!(b.model.store.get(name).unwrap(), p.value.as_ref());
        }
    }

    #[test]
    fn checkpoint_written_even_without_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = synthetic(2, 16, 16, 2, 1).unwrap();
        let mut cfg = TrainConfig::new(tiny(LambdaMode::Noiseless));
        cfg.epochs = 0;
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        let out = train(&cfg, &imgs[..1], &imgs[1..]).unwrap();
        assert!(out.history.records.is_empty());
        let back = checkpoint::load(dir.path()).unwrap();
        for (name, p) in out.model.store.iter() {
            assert_eq!(back.store.get(name).unwrap(), p.value.as_ref());
        }
    }

    #[test]
    fn nonfinite_loss_aborts() {
        let imgs = synthetic(2, 16, 16, 2, 1).unwrap();
        let mut cfg = TrainConfig::new(tiny(LambdaMode::Learnable { init: 1.0 }));
        cfg.epochs = 2;
        cfg.learning_rate = 1e300;
        cfg.batch_size = 1;
        let err = train(&cfg, &imgs[..1], &imgs[1..]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn identity_model_matches_zero_filled_baseline() {
        let imgs = synthetic(3, 16, 16, 7, 1).unwrap();
        let model = build_model(&tiny(LambdaMode::Noiseless), 0).unwrap();
        let mask = gaussian1d_mask(16, 4.0, 0.04, 1).unwrap();
        let r = evaluate(&model, &imgs, &mask, 2).unwrap();
        assert!((r.mean.psnr - r.mean.zf_psnr).abs() < 1e-6);
        assert!((r.mean.ssim - r.mean.zf_ssim).abs() < 1e-6);
        assert_eq!(evaluate(&model, &imgs, &mask, 1).unwrap(), r);
    }

    #[test]
    fn evaluate_rejects_geometry_mismatch() {
        let model = build_model(&tiny(LambdaMode::Noiseless), 0).unwrap();
        let mask = gaussian1d_mask(32, 4.0, 0.04, 1).unwrap();
        assert!(matches!(evaluate(&model, &synthetic(1, 16, 16, 0, 1).unwrap(), &mask, 1), Err(Error::Config(_))));
        let mask = gaussian1d_mask(16, 4.0, 0.04, 1).unwrap();
        assert!(matches!(evaluate(&model, &synthetic(1, 32, 32, 0, 1).unwrap(), &mask, 1), Err(Error::Config(_))));
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 5).is_empty());
    }
}
