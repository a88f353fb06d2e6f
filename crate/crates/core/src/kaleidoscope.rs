//! The (nu, sigma = 1) Kaleidoscope transform.
//!
//! An `H x W` image is rearranged into `nu^2` low-resolution copies of size
//! `(H/nu) x (W/nu)`. Copy `c = a*nu + b` holds the pixels at offsets
//! `(a, b)` on a stride-`nu` lattice, so copy `c` at `(i, j)` is source pixel
//! `(i*nu + a, j*nu + b)`. The transform is a pure permutation: no arithmetic
//! touches the pixel values.

use crate::error::{config_err, dim_err, Result};
use crate::tensor::RealTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KtParams {
    nu: usize,
    sigma: usize,
    height: usize,
    width: usize,
}

impl KtParams {
    pub fn new(nu: usize, height: usize, width: usize) -> Result<Self> {
        Self::with_sigma(nu, 1, height, width)
    }

    /// Only the unit smear factor is supported.
    pub fn with_sigma(nu: usize, sigma: usize, height: usize, width: usize) -> Result<Self> {
        if sigma != 1 {
            return Err(config_err!("smear factor {sigma} unsupported; only sigma = 1"));
        }
        if nu == 0 || height == 0 || width == 0 {
            return Err(dim_err!("nu={nu}, height={height}, width={width} must be positive"));
        }
        if height % nu != 0 || width % nu != 0 {
            return Err(dim_err!("nu={nu} does not divide image size {height}x{width}"));
        }
        Ok(Self { nu, sigma, height, width })
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn sigma(&self) -> usize {
        self.sigma
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_copies(&self) -> usize {
        self.nu * self.nu
    }

    /// Shape of one low-resolution copy.
    pub fn copy_shape(&self) -> (usize, usize) {
        (self.height / self.nu, self.width / self.nu)
    }

    pub fn stack_shape(&self) -> [usize; 3] {
        let (h, w) = self.copy_shape();
        [self.num_copies(), h, w]
    }
}

/// For each flat position of the stack, the flat source-pixel index.
pub fn kt_index_map(params: &KtParams) -> Vec<usize> {
    let nu = params.nu;
    let (ch, cw) = params.copy_shape();
    let mut map = Vec::with_capacity(params.height * params.width);
    for a in 0..nu {
        for b in 0..nu {
            for i in 0..ch {
                let row = (i * nu + a) * params.width;
                for j in 0..cw {
                    map.push(row + j * nu + b);
                }
            }
        }
    }
    map
}

/// Inverse of [`kt_index_map`]: for each source pixel, its flat stack position.
pub fn kt_inverse_map(params: &KtParams) -> Vec<usize> {
    let forward = kt_index_map(params);
    let mut inv = vec![0; forward.len()];
    for (pos, &src) in forward.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

#[derive(Clone, Debug, PartialEq)]
pub struct KtStack {
    copies: RealTensor,
    params: KtParams,
}

impl KtStack {
    pub fn new(copies: RealTensor, params: KtParams) -> Result<Self> {
        if copies.shape() != params.stack_shape() {
            return Err(dim_err!(
                "stack shape {:?} inconsistent with {:?}",
                copies.shape(),
                params.stack_shape()
            ));
        }
        Ok(Self { copies, params })
    }

    pub fn copies(&self) -> &RealTensor {
        &self.copies
    }

    pub fn params(&self) -> &KtParams {
        &self.params
    }

    /// Copy `c` as an `(H/nu) x (W/nu)` image.
    pub fn copy(&self, c: usize) -> RealTensor {
        let (h, w) = self.params.copy_shape();
        let data = self.copies.data()[c * h * w..(c + 1) * h * w].to_vec();
        RealTensor::from_parts(vec![h, w], data)
    }

    /// Tiles the copies on a `nu x nu` grid: copy `a*nu + b` at tile row `a`, column `b`.
    pub fn mosaic(&self) -> RealTensor {
        let nu = self.params.nu;
        let (h, w) = self.params.copy_shape();
        let width = self.params.width;
        let mut out = vec![0.0; self.params.height * width];
        for a in 0..nu {
            for b in 0..nu {
                let c = a * nu + b;
                for i in 0..h {
                    let src = &self.copies.data()[(c * h + i) * w..(c * h + i + 1) * w];
                    let start = (a * h + i) * width + b * w;
                    out[start..start + w].copy_from_slice(src);
                }
            }
        }
        RealTensor::from_parts(vec![self.params.height, width], out)
    }
}

fn check_image(img: &RealTensor, params: &KtParams) -> Result<()> {
    let (h, w) = img.dims2()?;
    if (h, w) != (params.height, params.width) {
        return Err(dim_err!(
            "image is {h}x{w}, params expect {}x{}",
            params.height,
            params.width
        ));
    }
    Ok(())
}

pub fn kt_forward(img: &RealTensor, params: &KtParams) -> Result<KtStack> {
    check_image(img, params)?;
    let src = img.data();
    let data = kt_index_map(params).into_iter().map(|k| src[k]).collect();
    KtStack::new(RealTensor::from_parts(params.stack_shape().to_vec(), data), *params)
}

pub fn kt_inverse(stack: &KtStack) -> Result<RealTensor> {
    let params = stack.params;
    if stack.copies.shape() != params.stack_shape() {
        return Err(dim_err!("stack shape does not match its parameters"));
    }
    let mut out = vec![0.0; params.height * params.width];
    for (&v, k) in stack.copies.data().iter().zip(kt_index_map(&params)) {
        out[k] = v;
    }
    Ok(RealTensor::from_parts(vec![params.height, params.width], out))
}
