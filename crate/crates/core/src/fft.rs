//! Orthonormal 2D discrete Fourier transform.
//!
//! Both directions are scaled by `1/sqrt(H*W)`, so the transform is unitary
//! and Parseval's identity holds without extra factors. Coefficients are kept
//! in the unshifted layout: index `(0, 0)` is DC.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{dim_err, Result};
use crate::tensor::{ComplexTensor, RealTensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform_in_place(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let (row_fft, col_fft) = if inverse {
            (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
        } else {
            (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
        };
        row_fft.process(data);

        let mut column = vec![Complex64::new(0.0, 0.0); rows];
        for j in 0..cols {
            for i in 0..rows {
                column[i] = data[i * cols + j];
            }
            col_fft.process(&mut column);
            for i in 0..rows {
                data[i * cols + j] = column[i];
            }
        }
    });
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
}

/// Forward orthonormal DFT of a complex matrix.
pub fn dft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    let (h, w) = x.dims2()?;
    if h == 0 || w == 0 {
        return Err(dim_err!("dft2 needs a non-empty matrix"));
    }
    let mut out = x.clone();
    transform_in_place(out.data_mut(), h, w, false);
    Ok(out)
}

/// Inverse orthonormal DFT.
pub fn idft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    let (h, w) = x.dims2()?;
    if h == 0 || w == 0 {
        return Err(dim_err!("idft2 needs a non-empty matrix"));
    }
    let mut out = x.clone();
    transform_in_place(out.data_mut(), h, w, true);
    Ok(out)
}

pub fn dft2_real(x: &RealTensor) -> Result<ComplexTensor> {
    dft2(&x.to_complex())
}
