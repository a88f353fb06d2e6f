//! `dctnn`: masks, Kaleidoscope mosaics, training, reconstruction and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric contract
//! violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dctnn_core::harness::checkpoint;
use dctnn_core::harness::config::{DataSource, RawConfig};
use dctnn_core::harness::dataset::{load_dir, split, synthetic};
use dctnn_core::harness::imageio::{read_gray_png, write_gray_png};
use dctnn_core::harness::mask::{gaussian1d_mask, SamplingMask, DEFAULT_CENTER_FRACTION};
use dctnn_core::harness::plot::write_loss_curve;
use dctnn_core::harness::train::{evaluate, metrics_csv, train};
use dctnn_core::kaleidoscope::{kt_forward, kt_inverse, KtParams, KtStack};
use dctnn_core::recon::dctnn_forward;
use dctnn_core::tensor::load_any_real;
use dctnn_core::{ComplexTensor, Error};

const OUT_ENV: &str = "DCTNN_OUT_DIR";
const DEFAULT_OUT: &str = "dctnn-out";

#[derive(Parser)]
#[command(name = "dctnn", version, about = "Transformer cascades for undersampled MRI reconstruction")]
struct Cli {
    /// Worker threads for dataset loading and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Force a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a 1D Gaussian column mask.
    Mask(MaskArgs),
    /// Write the Kaleidoscope mosaic of a grayscale PNG.
    KtDemo(KtDemoArgs),
    /// Train a cascade from a configuration file.
    Train(TrainArgs),
    /// Reconstruct one image from measured k-space.
    Reconstruct(ReconstructArgs),
    /// Evaluate a checkpoint on a directory of images.
    Eval(EvalArgs),
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    width: usize,
    /// Reduction factor.
    #[arg(long)]
    r: f64,
    #[arg(long, default_value_t = DEFAULT_CENTER_FRACTION)]
    center_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows of the PNG visualisation (default: width).
    #[arg(long)]
    height: Option<usize>,
    /// Output directory [env: DCTNN_OUT_DIR].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KtDemoArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    nu: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration entry, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Complex k-space tensor, unshifted.
    #[arg(long)]
    kspace: PathBuf,
    /// Mask tensor as written by `dctnn mask`.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of .png or .ktns images.
    #[arg(long)]
    dataset: PathBuf,
    /// One or more mask tensors; one CSV row each.
    #[arg(long, required = true, num_args = 1..)]
    mask: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(flag: Option<PathBuf>, fallback: Option<PathBuf>) -> Result<PathBuf, Error> {
    let dir = flag
        .or(fallback)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_mask(path: &Path) -> Result<SamplingMask, Error> {
    SamplingMask::from_tensor(&load_any_real(path)?)
}

fn cmd_mask(a: MaskArgs) -> Result<(), Error> {
    let mask = gaussian1d_mask(a.width, a.r, a.center_frac, a.seed)?;
    let out = out_dir(a.out, None)?;
    mask.to_tensor().save(out.join("mask.ktns"))?;
    write_gray_png(out.join("mask.png"), &mask.centered_image(a.height.unwrap_or(a.width)))?;
    println!(
        "sampled {}/{} columns (achieved R = {:.3})",
        mask.num_sampled(),
        mask.width(),
        mask.achieved_reduction()
    );
    Ok(())
}

fn cmd_kt_demo(a: KtDemoArgs) -> Result<(), Error> {
    let img = read_gray_png(&a.input)?;
    let (h, w) = img.dims2()?;
    let params = KtParams::new(a.nu, h, w)?;
    let out = out_dir(a.out, None)?;
    let mut stack = kt_forward(&img, &params)?;
    let mosaic = stack.mosaic();
    mosaic.save(out.join("mosaic.ktns"))?;
    write_gray_png(out.join("mosaic.png"), &mosaic)?;
    if a.inject_fault {
        let mut copies = stack.copies().clone();
        copies.data_mut()[0] += 1.0;
        stack = KtStack::new(copies, params)?;
    }
    if kt_inverse(&stack)? != img {
        return Err(Error::Numeric("Kaleidoscope round trip did not reproduce the input".into()));
    }
    let (th, tw) = params.copy_shape();
    println!("{nu}x{nu} mosaic of {th}x{tw} tiles; round trip exact", nu = a.nu);
    Ok(())
}

fn cmd_train(a: TrainArgs, threads: usize) -> Result<(), Error> {
    let mut raw = RawConfig::load(&a.config)?;
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
        raw.set(k.trim(), v.trim())?;
    }
    if let Some(e) = a.epochs {
        raw.set("train.epochs", &e.to_string())?;
    }
    let mut run = raw.resolve()?;
    let out = out_dir(a.out, run.out.clone())?;
    run.check_paths(&out)?;

    let (h, w) = (run.train.model.height, run.train.model.width);
    let images = match &run.source {
        DataSource::Synthetic { count, seed } => synthetic(*count, h, w, *seed, threads)?,
        DataSource::Directory(dir) => load_dir(dir, h, w, threads)?,
    };
    let data = split(images, run.split)?;
    println!(
        "training {} images, validating {}, testing {}; {} parameters",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        dctnn_core::recon::build_model(&run.train.model, run.train.seed)?.param_count()
    );
    run.train.checkpoint_dir = Some(out.join("checkpoint"));
    let outcome = train(&run.train, &data.train, &data.val)?;
    outcome.history.write_csv(out.join("history.csv"))?;
    write_loss_curve(out.join("loss_curve.png"), &outcome.history.train_mae(), &outcome.history.val_mae())?;
    outcome.mask.to_tensor().save(out.join("mask.ktns"))?;
    write_gray_png(out.join("mask.png"), &outcome.mask.centered_image(h))?;
    for r in &outcome.history.records {
        println!(
            "epoch {:>3}  train MAE {:.5}  val MAE {:.5}  val PSNR {:.2}  val SSIM {:.4}",
            r.epoch, r.train_mae, r.val_mae, r.val_psnr, r.val_ssim
        );
    }
    if !data.test.is_empty() {
        let report = evaluate(&outcome.best, &data.test, &outcome.mask, threads)?;
        std::fs::write(out.join("metrics.csv"), metrics_csv(std::slice::from_ref(&report)))?;
        println!(
            "test (best epoch {}): PSNR {:.2} SSIM {:.4}; zero-filled PSNR {:.2} SSIM {:.4}",
            outcome.best_epoch, report.mean.psnr, report.mean.ssim, report.mean.zf_psnr, report.mean.zf_ssim
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<(), Error> {
    let model = checkpoint::load(&a.checkpoint)?;
    let mask = load_mask(&a.mask)?;
    let y = ComplexTensor::load(&a.kspace)?;
    let out = out_dir(a.out, None)?;
    let x = dctnn_forward(&model, &y, &mask)?;
    x.save(out.join("recon.ktns"))?;
    write_gray_png(out.join("recon.png"), &x)?;
    println!("wrote {}", out.join("recon.png").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs, threads: usize) -> Result<(), Error> {
    let model = checkpoint::load(&a.checkpoint)?;
    let masks = a.mask.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>, _>>()?;
    let out = out_dir(a.out, None)?;
    let images = load_dir(&a.dataset, model.config().height, model.config().width, threads)?;
    let reports = masks.iter().map(|m| evaluate(&model, &images, m, threads)).collect::<Result<Vec<_>, _>>()?;
    let csv = metrics_csv(&reports);
    std::fs::write(out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Contract(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let threads = if cli.deterministic {
        1
    } else {
        cli.threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    };
    let result = match cli.command {
        Command::Mask(a) => cmd_mask(a),
        Command::KtDemo(a) => cmd_kt_demo(a),
        Command::Train(a) => cmd_train(a, threads),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
