//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters are
//! pulled in from a [`ParamStore`] by name; [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients into the store's gradient slots.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;
use num_complex::Complex64;

use crate::error::{config_err, dim_err, Error, Result};
use crate::fft;
use crate::ops::{self, gemm_acc, MatRef};
use crate::tensor::{ComplexTensor, RealTensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Arc<RealTensor>,
    pub grad: RealTensor,
}

/// Named learnable tensors with same-shape gradient slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: RealTensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(config_err!("duplicate parameter name {name}"));
        }
        let grad = RealTensor::zeros(value.shape());
        self.params.insert(name, Param { value: Arc::new(value), grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&RealTensor> {
        self.params.get(name).map(|p| p.value.as_ref())
    }

    pub fn grad(&self, name: &str) -> Option<&RealTensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: RealTensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| config_err!("unknown parameter {name}"))?;
        if p.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {name} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to the raw values of one parameter.
    pub fn value_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.params
            .get_mut(name)
            .map(|p| Arc::make_mut(&mut p.value).data_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn advance_step(&mut self) {
        self.step += 1;
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    fn slot(&self, name: &str) -> Option<(usize, &Param)> {
        self.params.get_full(name).map(|(i, _, p)| (i, p))
    }
}

enum Op {
    Input,
    Param { slot: usize, name: String },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow { a: usize, bias: usize },
    Gelu(usize),
    Exp(usize),
    Abs(usize),
    Square(usize),
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cache: ops::LayerNormCache },
    Reshape(usize),
    Transpose(usize),
    Gather { a: usize, index: Arc<Vec<usize>> },
    SliceCols { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    Sum(usize),
    Mean(usize),
    DataConsistency(Box<DcRecord>),
}

struct DcRecord {
    x: usize,
    lambda: Option<usize>,
    measured: Arc<ComplexTensor>,
    sampled: Arc<Vec<bool>>,
    spectrum: ComplexTensor,
}

struct Node {
    value: Arc<RealTensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients with respect to every node of a graph after a backward pass.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<RealTensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&RealTensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

/// A recorded forward computation.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {v:?} was not recorded on graph {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: RealTensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn push_derived(&mut self, value: RealTensor, op: Op, inputs: &[usize]) -> Var {
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(value, op, needs)
    }

    pub fn value(&self, v: Var) -> Result<&RealTensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: RealTensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is tracked and reported in [`Gradients`].
    pub fn variable(&mut self, t: RealTensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Learnable leaf bound to a named parameter of `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let (slot, p) = store
            .slot(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not in the store")))?;
        let value = Arc::clone(&p.value);
        self.nodes.push(Node { value, op: Op::Param { slot, name: name.to_string() }, needs_grad: true });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    fn binary_same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(dim_err!("{what}: shape {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_flags(a, false, b, false)
    }

    /// `a * b^T` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_flags(a, false, b, true)
    }

    fn matmul_flags(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::matmul_flags(&self.nodes[ia].value, ta, &self.nodes[ib].value, tb)?;
        Ok(self.push_derived(out, Op::MatMul { a: ia, b: ib, ta, tb }, &[ia, ib]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.binary_same_shape(ia, ib, "add")?;
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y)?;
        Ok(self.push_derived(out, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.binary_same_shape(ia, ib, "sub")?;
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y)?;
        Ok(self.push_derived(out, Op::Sub(ia, ib), &[ia, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.binary_same_shape(ia, ib, "mul")?;
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y)?;
        Ok(self.push_derived(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|x| x * s);
        Ok(self.push_derived(out, Op::Scale(ia, s), &[ia]))
    }

    /// Adds a length-`d` vector to every row of a `[.., d]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let x = &self.nodes[ia].value;
        let b = &self.nodes[ib].value;
        let d = *x.shape().last().unwrap_or(&0);
        if b.len() != d {
            return Err(dim_err!("add_row: row width {d}, bias length {}", b.len()));
        }
        let mut out = x.as_ref().clone();
        if d > 0 {
            for row in out.data_mut().chunks_exact_mut(d) {
                row.iter_mut().zip(b.data()).for_each(|(o, v)| *o += v);
            }
        }
        Ok(self.push_derived(out, Op::AddRow { a: ia, bias: ib }, &[ia, ib]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = ops::gelu(&self.nodes[ia].value);
        Ok(self.push_derived(out, Op::Gelu(ia), &[ia]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f64::exp);
        if !out.is_finite() {
            return Err(Error::Numeric("exp overflow".into()));
        }
        Ok(self.push_derived(out, Op::Exp(ia), &[ia]))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f64::abs);
        Ok(self.push_derived(out, Op::Abs(ia), &[ia]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|x| x * x);
        Ok(self.push_derived(out, Op::Square(ia), &[ia]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let out = ops::softmax(&self.nodes[ia].value, axis)?;
        Ok(self.push_derived(out, Op::Softmax { a: ia, axis }, &[ia]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (out, cache) =
            ops::layer_norm_forward(&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value, eps)?;
        Ok(self.push_derived(out, Op::LayerNorm { x: ix, gain: ig, bias: ib, cache }, &[ix, ig, ib]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        Ok(self.push_derived(out, Op::Reshape(ia), &[ia]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.transpose2()?;
        Ok(self.push_derived(out, Op::Transpose(ia), &[ia]))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let src = self.nodes[ia].value.data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(dim_err!("gather: {} indices for shape {shape:?}", index.len()));
        }
        let mut data = Vec::with_capacity(index.len());
        for &k in index.iter() {
            data.push(*src.get(k).ok_or_else(|| dim_err!("gather index {k} out of range"))?);
        }
        let out = RealTensor::from_parts(shape.to_vec(), data);
        Ok(self.push_derived(out, Op::Gather { a: ia, index }, &[ia]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.nodes[ia].value.dims2()?;
        if start + len > c {
            return Err(dim_err!("slice_cols {start}..{} of {c} columns", start + len));
        }
        let src = self.nodes[ia].value.data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = RealTensor::from_parts(vec![r, len], data);
        Ok(self.push_derived(out, Op::SliceCols { a: ia, start }, &[ia]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or_else(|| dim_err!("concat_cols of nothing"))?;
        let rows = self.nodes[*first].value.dims2()?.0;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = self.nodes[i].value.dims2()?;
            if r != rows {
                return Err(dim_err!("concat_cols row mismatch {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (&i, &c) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[row * c..(row + 1) * c]);
            }
        }
        let out = RealTensor::from_parts(vec![rows, total], data);
        let inputs = idx.clone();
        Ok(self.push_derived(out, Op::ConcatCols(idx), &inputs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = RealTensor::scalar(self.nodes[ia].value.sum());
        Ok(self.push_derived(out, Op::Sum(ia), &[ia]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let n = self.nodes[ia].value.len();
        if n == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let out = RealTensor::scalar(self.nodes[ia].value.sum() / n as f64);
        Ok(self.push_derived(out, Op::Mean(ia), &[ia]))
    }

    /// Mean absolute error between two same-shape tensors.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// k-space data consistency on an image estimate.
    ///
    /// With `lambda = Some(l)` the sampled coefficients become
    /// `(X + l*y) / (1 + l)`; with `None` they are replaced by `y`. Unsampled
    /// coefficients pass through. Returns the real part of the inverse DFT.
    pub fn data_consistency(
        &mut self,
        x: Var,
        lambda: Option<Var>,
        measured: Arc<ComplexTensor>,
        sampled: Arc<Vec<bool>>,
    ) -> Result<Var> {
        let ix = self.check(x)?;
        let il = lambda.map(|l| self.check(l)).transpose()?;
        let img = &self.nodes[ix].value;
        if img.shape() != measured.shape() || sampled.len() != img.len() {
            return Err(dim_err!(
                "data consistency: image {:?}, k-space {:?}, mask of {}",
                img.shape(),
                measured.shape(),
                sampled.len()
            ));
        }
        let lam = match il {
            Some(i) => {
                let l = &self.nodes[i].value;
                if l.len() != 1 {
                    return Err(dim_err!("lambda must be a scalar"));
                }
                Some(l.data()[0])
            }
            None => None,
        };
        let spectrum = fft::dft2_real(img)?;
        let mut mixed = spectrum.clone();
        for ((z, &s), y) in mixed.data_mut().iter_mut().zip(sampled.iter()).zip(measured.data()) {
            if s {
                *z = match lam {
                    Some(l) => (*z + y * l) / (1.0 + l),
                    None => *y,
                };
            }
        }
        let out = fft::idft2(&mixed)?.re();
        let mut inputs = vec![ix];
        inputs.extend(il);
        let record = DcRecord { x: ix, lambda: il, measured, sampled, spectrum };
        Ok(self.push_derived(out, Op::DataConsistency(Box::new(record)), &inputs))
    }

    /// Back-propagates from a scalar `loss`, adding parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<RealTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(RealTensor::scalar(1.0));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            if let Op::Param { slot, name } = &node.op {
                let p = match store.params.get_index_mut(*slot) {
                    Some((k, p)) if k == name => p,
                    _ => return Err(Error::Contract(format!("parameter {name} missing from store"))),
                };
                if p.grad.shape() != g.shape() {
                    return Err(Error::Contract(format!("gradient shape mismatch for {name}")));
                }
                p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn val(&self, i: usize) -> &RealTensor {
        &self.nodes[i].value
    }

    fn propagate(&self, i: usize, g: &RealTensor, grads: &mut [Option<RealTensor>]) -> Result<()> {
        let wants = |j: usize| self.nodes[j].needs_grad;
        match &self.nodes[i].op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let gm = MatRef::new(g, false)?;
                let av = MatRef::new(self.val(a), false)?;
                let bv = MatRef::new(self.val(b), false)?;
                let flip = MatRef::flipped;
                if wants(a) {
                    let slot = grad_slot(grads, a, self.val(a).shape());
                    match ta {
                        // d op(A) = G op(B)^T
                        false => gemm_acc(gm, if tb { bv } else { flip(bv) }, slot.data_mut())?,
                        // dA = op(B) G^T
                        true => gemm_acc(if tb { flip(bv) } else { bv }, flip(gm), slot.data_mut())?,
                    };
                }
                if wants(b) {
                    let slot = grad_slot(grads, b, self.val(b).shape());
                    match tb {
                        // dB = op(A)^T G
                        false => gemm_acc(if ta { av } else { flip(av) }, gm, slot.data_mut())?,
                        // dB = G^T op(A)
                        true => gemm_acc(flip(gm), if ta { flip(av) } else { av }, slot.data_mut())?,
                    };
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g, wants(*a));
                accumulate(grads, *b, g, wants(*b));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g, wants(*a));
                if wants(*b) {
                    accumulate(grads, *b, &g.map(|v| -v), true);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, &g.zip_map(self.val(*b), |x, y| x * y)?, true);
                }
                if wants(*b) {
                    accumulate(grads, *b, &g.zip_map(self.val(*a), |x, y| x * y)?, true);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, &g.map(|v| v * s), wants(*a));
            }
            Op::AddRow { a, bias } => {
                accumulate(grads, *a, g, wants(*a));
                if wants(*bias) {
                    let d = self.val(*bias).len();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    let shape = self.val(*bias).shape().to_vec();
                    accumulate(grads, *bias, &RealTensor::from_parts(shape, gb), true);
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let d = g.zip_map(self.val(*a), |gv, x| gv * ops::gelu_grad_scalar(x))?;
                    accumulate(grads, *a, &d, true);
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    accumulate(grads, *a, &g.zip_map(self.val(i), |gv, y| gv * y)?, true);
                }
            }
            Op::Abs(a) => {
                if wants(*a) {
                    let d = g.zip_map(self.val(*a), |gv, x| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 })?;
                    accumulate(grads, *a, &d, true);
                }
            }
            Op::Square(a) => {
                if wants(*a) {
                    accumulate(grads, *a, &g.zip_map(self.val(*a), |gv, x| 2.0 * x * gv)?, true);
                }
            }
            Op::Softmax { a, axis } => {
                if wants(*a) {
                    let y = self.val(i);
                    let (outer, n, inner) = ops::axis_extents(y.shape(), *axis)?;
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |t: usize| (o * n + t) * inner + k;
                            let dot: f64 = (0..n).map(|t| g.data()[at(t)] * y.data()[at(t)]).sum();
                            for t in 0..n {
                                d[at(t)] = y.data()[at(t)] * (g.data()[at(t)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *a, &RealTensor::from_parts(y.shape().to_vec(), d), true);
                }
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let dim = self.val(*gain).len();
                let rows = g.len() / dim.max(1);
                let gd = g.data();
                if wants(*gain) || wants(*bias) {
                    let mut gg = vec![0.0; dim];
                    let mut gbv = vec![0.0; dim];
                    for r in 0..rows {
                        for c in 0..dim {
                            gg[c] += gd[r * dim + c] * cache.normalized[r * dim + c];
                            gbv[c] += gd[r * dim + c];
                        }
                    }
                    let gshape = self.val(*gain).shape().to_vec();
                    let bshape = self.val(*bias).shape().to_vec();
                    accumulate(grads, *gain, &RealTensor::from_parts(gshape, gg), wants(*gain));
                    accumulate(grads, *bias, &RealTensor::from_parts(bshape, gbv), wants(*bias));
                }
                if wants(*x) {
                    let gain_v = self.val(*gain).data();
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let xhat = &cache.normalized[r * dim..(r + 1) * dim];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..dim {
                            let dxhat = gd[r * dim + c] * gain_v[c];
                            mean_d += dxhat;
                            mean_dx += dxhat * xhat[c];
                        }
                        mean_d /= dim as f64;
                        mean_dx /= dim as f64;
                        for c in 0..dim {
                            let dxhat = gd[r * dim + c] * gain_v[c];
                            dx[r * dim + c] = cache.inv_std[r] * (dxhat - mean_d - xhat[c] * mean_dx);
                        }
                    }
                    let shape = self.val(*x).shape().to_vec();
                    accumulate(grads, *x, &RealTensor::from_parts(shape, dx), true);
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    accumulate(grads, *a, &g.reshape(self.val(*a).shape())?, true);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    accumulate(grads, *a, &g.transpose2()?, true);
                }
            }
            Op::Gather { a, index } => {
                if wants(*a) {
                    let slot = grad_slot(grads, *a, self.val(*a).shape());
                    let dst = slot.data_mut();
                    for (gv, &k) in g.data().iter().zip(index.iter()) {
                        dst[k] += gv;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if wants(*a) {
                    let (r, c) = self.val(*a).dims2()?;
                    let len = g.dims2()?.1;
                    let slot = grad_slot(grads, *a, &[r, c]);
                    let dst = slot.data_mut();
                    for row in 0..r {
                        for j in 0..len {
                            dst[row * c + start + j] += g.data()[row * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let c = self.val(p).dims2()?.1;
                    if wants(p) {
                        let slot = grad_slot(grads, p, &[rows, c]);
                        let dst = slot.data_mut();
                        for row in 0..rows {
                            for j in 0..c {
                                dst[row * c + j] += g.data()[row * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let gv = g.data()[0];
                    accumulate(grads, *a, &RealTensor::full(self.val(*a).shape(), gv), true);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = self.val(*a).len() as f64;
                    let gv = g.data()[0] / n;
                    accumulate(grads, *a, &RealTensor::full(self.val(*a).shape(), gv), true);
                }
            }
            Op::DataConsistency(rec) => self.propagate_dc(rec, g, grads)?,
        }
        Ok(())
    }

    fn propagate_dc(&self, rec: &DcRecord, g: &RealTensor, grads: &mut [Option<RealTensor>]) -> Result<()> {
        // Adjoint of Re(idft2(.)) for the unitary transform is dft2.
        let g_mixed = fft::dft2_real(g)?;
        let lam = rec.lambda.map(|l| self.val(l).data()[0]);
        if self.nodes[rec.x].needs_grad {
            let mut g_spec = g_mixed.clone();
            for (v, &s) in g_spec.data_mut().iter_mut().zip(rec.sampled.iter()) {
                if s {
                    *v = match lam {
                        Some(l) => *v / (1.0 + l),
                        None => Complex64::new(0.0, 0.0),
                    };
                }
            }
            let dx = fft::idft2(&g_spec)?.re();
            accumulate(grads, rec.x, &dx, true);
        }
        if let (Some(il), Some(l)) = (rec.lambda, lam) {
            if self.nodes[il].needs_grad {
                let denom = (1.0 + l) * (1.0 + l);
                let mut dl = 0.0;
                for (((gz, &s), y), xh) in g_mixed
                    .data()
                    .iter()
                    .zip(rec.sampled.iter())
                    .zip(rec.measured.data())
                    .zip(rec.spectrum.data())
                {
                    if s {
                        let dz = (y - xh) / denom;
                        dl += (gz.conj() * dz).re;
                    }
                }
                let shape = self.val(il).shape().to_vec();
                accumulate(grads, il, &RealTensor::from_parts(shape, vec![dl]), true);
            }
        }
        Ok(())
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<RealTensor>], i: usize, shape: &[usize]) -> &'a mut RealTensor {
    grads[i].get_or_insert_with(|| RealTensor::zeros(shape))
}

fn accumulate(grads: &mut [Option<RealTensor>], i: usize, g: &RealTensor, wanted: bool) {
    if !wanted {
        return;
    }
    match &mut grads[i] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.clone()),
    }
}
