//! Forward kernels shared by the plain API and the gradient tape.

use crate::error::{dim_err, Result};
use crate::tensor::RealTensor;

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(t: &'a RealTensor, transposed: bool) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Ok(Self { data: t.data(), rows, cols, transposed })
    }

    pub fn flipped(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    /// Logical (rows, cols) after the optional transpose.
    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// (row stride, col stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out += a * b` for logical operands; `out` is row-major `m x n`.
pub(crate) fn gemm_acc(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64]) -> Result<(usize, usize)> {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    if k != k2 {
        return Err(dim_err!("matmul inner dimensions differ: {m}x{k} * {k2}x{n}"));
    }
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return Ok((m, n));
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the slices cover every index addressed by the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok((m, n))
}

pub(crate) fn matmul_flags(a: &RealTensor, ta: bool, b: &RealTensor, tb: bool) -> Result<RealTensor> {
    let a = MatRef::new(a, ta)?;
    let b = MatRef::new(b, tb)?;
    let m = a.logical().0;
    let n = b.logical().1;
    let mut out = vec![0.0; m * n];
    gemm_acc(a, b, &mut out)?;
    Ok(RealTensor::from_parts(vec![m, n], out))
}

/// Matrix product `a[m x k] * b[k x n]`.
pub fn matmul(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    matmul_flags(a, false, b, false)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-stabilised softmax along `axis`.
pub fn softmax(v: &RealTensor, axis: usize) -> Result<RealTensor> {
    let (outer, n, inner) = axis_extents(v.shape(), axis)?;
    let x = v.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Ok(RealTensor::from_parts(v.shape().to_vec(), out))
}

/// Per-row statistics kept for the layer-norm backward pass.
pub(crate) struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    v: &RealTensor,
    gain: &RealTensor,
    bias: &RealTensor,
    eps: f64,
) -> Result<(RealTensor, LayerNormCache)> {
    let d = *v.shape().last().ok_or_else(|| dim_err!("layer_norm on a rank-0 tensor"))?;
    if gain.len() != d || bias.len() != d {
        return Err(dim_err!(
            "layer_norm width {d} but gain/bias have {}/{}",
            gain.len(),
            bias.len()
        ));
    }
    let rows = if d == 0 { 0 } else { v.len() / d };
    let mut normalized = vec![0.0; v.len()];
    let mut out = vec![0.0; v.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &v.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for c in 0..d {
            let nrm = (row[c] - mean) * istd;
            normalized[r * d + c] = nrm;
            out[r * d + c] = nrm * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((
        RealTensor::from_parts(v.shape().to_vec(), out),
        LayerNormCache { normalized, inv_std },
    ))
}

/// Layer normalisation over the last dimension followed by `gain * . + bias`.
pub fn layer_norm(v: &RealTensor, gain: &RealTensor, bias: &RealTensor, eps: f64) -> Result<RealTensor> {
    layer_norm_forward(v, gain, bias, eps).map(|(out, _)| out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-form GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(v: &RealTensor) -> RealTensor {
    v.map(gelu_scalar)
}
