mod common;

use common::{oracle_mse, oracle_ssim, rng, uniform};
use dctnn_core::fft::{dft2_real, idft2};
use dctnn_core::harness::mask::{column_frequency, column_weight, frequency_column, gaussian1d_mask, undersample, SamplingMask};
use dctnn_core::harness::metrics::{mae, psnr, ssim};
use dctnn_core::RealTensor;
use rand::Rng;

/// Successive weighted draws without replacement, written out longhand.
fn naive_pair_draw(rng: &mut impl Rng, weights: &[f64], k: usize) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; weights.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().zip(&alive).filter(|(_, &a)| a).map(|(w, _)| w).sum();
        let mut u = rng.random_range(0.0..total);
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        alive[pick] = false;
        out.push(pick);
    }
    out
}

#[test]
fn mask_r8_column_frequencies_follow_gaussian_weights() {
    const DRAWS: usize = 100_000;
    let w = 320;
    let m0 = gaussian1d_mask(w, 8.0, 0.04, 0).unwrap();
    assert_eq!(m0.num_sampled(), 40);
    // 4% of 320 rounds to 13 centre columns: frequencies -6..=6
    let centre: Vec<isize> = (-6..=6).collect();

    // pairs (f, -f) for f = 7..=159 compete for the remaining 13 pairs;
    // the 40th column is the Nyquist column
    let pair_freqs: Vec<isize> = (7..=159).collect();
    let weights: Vec<f64> = pair_freqs.iter().map(|&f| column_weight(f, w)).collect();
    let mut impl_hits = vec![0usize; pair_freqs.len()];
    for seed in 0..DRAWS as u64 {
        let m = gaussian1d_mask(w, 8.0, 0.04, seed).unwrap();
        assert_eq!(m.num_sampled(), 40);
        for &f in &centre {
            assert!(m.columns()[frequency_column(f, w)], "centre frequency {f} missing (seed {seed})");
        }
        assert!(m.columns()[w / 2]);
        for (i, &f) in pair_freqs.iter().enumerate() {
            if m.columns()[frequency_column(f, w)] {
                impl_hits[i] += 1;
            }
        }
    }
    let mut oracle_hits = vec![0usize; pair_freqs.len()];
    let mut r = rng(2024);
    for _ in 0..DRAWS {
        for i in naive_pair_draw(&mut r, &weights, 13) {
            oracle_hits[i] += 1;
        }
    }
    for i in 0..pair_freqs.len() {
        let p = impl_hits[i] as f64 / DRAWS as f64;
        let q = oracle_hits[i] as f64 / DRAWS as f64;
        let sd = ((p * (1.0 - p) + q * (1.0 - q)) / DRAWS as f64).sqrt();
        assert!((p - q).abs() <= 5.0 * sd + 1e-4, "frequency {}: {p} vs {q}", pair_freqs[i]);
    }
    // the weight profile makes low frequencies more likely than high ones
    assert!(impl_hits[0] > impl_hits[40] && impl_hits[40] > impl_hits[100]);
}

#[test]
fn masks_are_one_dimensional_and_symmetric() {
    for (w, r) in [(64, 4.0), (63, 3.0), (320, 6.0), (16, 2.0)] {
        let m = gaussian1d_mask(w, r, 0.04, 1).unwrap();
        assert_eq!(m.num_sampled(), (w as f64 / r).round() as usize);
        assert!(m.is_conjugate_symmetric(), "W={w} R={r}");
        let full = m.expand(5);
        for row in full.chunks(w) {
            assert_eq!(row, m.columns());
        }
        for j in 0..w {
            assert_eq!(frequency_column(column_frequency(j, w), w), j);
        }
    }
}

#[test]
fn undersampling_is_a_projection() {
    let img = uniform(&mut rng(4), &[16, 24], 0.0, 1.0);
    let spectrum = dft2_real(&img).unwrap();
    let full = undersample(&img, &SamplingMask::full(24)).unwrap();
    assert_eq!(full, spectrum);
    assert!(idft2(&full).unwrap().re().max_abs_diff(&img) < 1e-10);
    let empty = undersample(&img, &SamplingMask::empty(24)).unwrap();
    assert_eq!(empty.norm(), 0.0);
    let m = gaussian1d_mask(24, 3.0, 0.04, 0).unwrap();
    let y = undersample(&img, &m).unwrap();
    assert!(y.norm() < spectrum.norm());
    assert!(undersample(&img, &gaussian1d_mask(16, 2.0, 0.04, 0).unwrap()).is_err());
}

#[test]
fn metrics_match_direct_formulas() {
    let mut r = rng(9);
    for n in 0..100 {
        let (h, w) = (r.random_range(11..28), r.random_range(11..28));
        let reference = uniform(&mut r, &[h, w], 0.0, 1.0);
        let x = if n % 2 == 0 {
            uniform(&mut r, &[h, w], 0.0, 1.0)
        } else {
            reference.zip_map(&uniform(&mut r, &[h, w], -0.1, 0.1), |a, b| a + b).unwrap()
        };
        let m = oracle_mse(&x, &reference);
        assert!((psnr(&x, &reference).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-8);
        let direct_mae = x.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / (h * w) as f64;
        assert!((mae(&x, &reference).unwrap() - direct_mae).abs() < 1e-8);
        assert!((ssim(&x, &reference).unwrap() - oracle_ssim(&x, &reference)).abs() < 1e-8);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let v = uniform(&mut rng(12), &[7, 9], -20.0, 20.0);
    let s = dctnn_core::ops::softmax(&v, 1).unwrap();
    for i in 0..7 {
        let row: f64 = (0..9).map(|j| s.get2(i, j)).sum();
        assert!((row - 1.0).abs() < 1e-12);
    }
}

#[test]
fn constant_offset_psnr_is_twenty() {
    let r = RealTensor::full(&[32, 32], 0.5);
    let x = RealTensor::full(&[32, 32], 0.6);
    assert!((psnr(&x, &r).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn zero_filled_golden_psnr() {
    let img = dctnn_core::harness::phantom::phantom_generate(64, 64, 0).unwrap().image;
    let mask = gaussian1d_mask(64, 4.0, 0.04, 0).unwrap();
    let zf = dctnn_core::recon::zero_filled(&undersample(&img, &mask).unwrap(), &mask).unwrap();
    let full = SamplingMask::full(64);
    let exact = dctnn_core::recon::zero_filled(&undersample(&img, &full).unwrap(), &full).unwrap();
    let p = psnr(&zf, &img).unwrap();
    assert!((p - 21.086749831128).abs() < 1e-9, "{p}");
    assert!(p < psnr(&exact, &img).unwrap());
}
