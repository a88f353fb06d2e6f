//! Image <-> token layouts and the learned token embedding.
//!
//! Every spatial layout (patch, Kaleidoscope, axial rows, axial columns) is a
//! fixed permutation of the image pixels, so tokenising is a gather and
//! detokenising is the inverse gather. The learned part is the linear
//! projection into `d_model`, its independent learned inverse, and a
//! positional table.

use std::fmt;
use std::sync::Arc;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{dim_err, Error, Result};
use crate::kaleidoscope::{kt_index_map, KtParams};
use crate::ops;
use crate::tensor::RealTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    /// Non-overlapping `p x p` blocks in raster order.
    Patch(usize),
    /// Flattened Kaleidoscope copies of side `p` (`nu = H / p`).
    Kaleidoscope(usize),
    /// Token `i` is image row `i`.
    AxialRows,
    /// Token `j` is image column `j`.
    AxialCols,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Patch(p) => write!(f, "patch{p}"),
            TokenKind::Kaleidoscope(p) => write!(f, "kd{p}"),
            TokenKind::AxialRows => write!(f, "axial-rows"),
            TokenKind::AxialCols => write!(f, "axial-cols"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Rows,
    Cols,
}

/// Precomputed gather indices for one token kind at one image size.
#[derive(Clone, Debug)]
pub struct TokenLayout {
    kind: TokenKind,
    height: usize,
    width: usize,
    n_tokens: usize,
    token_dim: usize,
    forward: Arc<Vec<usize>>,
    inverse: Arc<Vec<usize>>,
}

fn patch_index(h: usize, w: usize, p: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for bi in 0..h / p {
        for bj in 0..w / p {
            for i in 0..p {
                for j in 0..p {
                    idx.push((bi * p + i) * w + bj * p + j);
                }
            }
        }
    }
    idx
}

fn transpose_index(h: usize, w: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for j in 0..w {
        for i in 0..h {
            idx.push(i * w + j);
        }
    }
    idx
}

impl TokenLayout {
    pub fn new(kind: TokenKind, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(dim_err!("empty image {height}x{width}"));
        }
        let (forward, n_tokens, token_dim) = match kind {
            TokenKind::Patch(p) => {
                if p == 0 || height % p != 0 || width % p != 0 {
                    return Err(dim_err!("patch size {p} does not divide {height}x{width}"));
                }
                (patch_index(height, width, p), (height / p) * (width / p), p * p)
            }
            TokenKind::Kaleidoscope(p) => {
                if height != width {
                    return Err(dim_err!("Kaleidoscope tokens need a square image, got {height}x{width}"));
                }
                if p == 0 || height % p != 0 {
                    return Err(dim_err!("token side {p} does not divide {height}"));
                }
                let nu = height / p;
                let params = KtParams::new(nu, height, width)?;
                (kt_index_map(&params), nu * nu, p * p)
            }
            TokenKind::AxialRows => ((0..height * width).collect(), height, width),
            TokenKind::AxialCols => (transpose_index(height, width), width, height),
        };
        let mut inverse = vec![0; forward.len()];
        for (pos, &src) in forward.iter().enumerate() {
            inverse[src] = pos;
        }
        Ok(Self {
            kind,
            height,
            width,
            n_tokens,
            token_dim,
            forward: Arc::new(forward),
            inverse: Arc::new(inverse),
        })
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn check_image(&self, img: &RealTensor) -> Result<()> {
        if img.dims2()? != (self.height, self.width) {
            return Err(dim_err!(
                "{} layout built for {}x{}, image is {:?}",
                self.kind,
                self.height,
                self.width,
                img.shape()
            ));
        }
        Ok(())
    }

    pub fn tokenize(&self, img: &RealTensor) -> Result<RealTensor> {
        self.check_image(img)?;
        let src = img.data();
        let data = self.forward.iter().map(|&k| src[k]).collect();
        Ok(RealTensor::from_parts(vec![self.n_tokens, self.token_dim], data))
    }

    pub fn detokenize(&self, tokens: &RealTensor) -> Result<RealTensor> {
        if tokens.dims2()? != (self.n_tokens, self.token_dim) {
            return Err(dim_err!(
                "{} expects {}x{} tokens, got {:?}",
                self.kind,
                self.n_tokens,
                self.token_dim,
                tokens.shape()
            ));
        }
        let src = tokens.data();
        let data = self.inverse.iter().map(|&k| src[k]).collect();
        Ok(RealTensor::from_parts(vec![self.height, self.width], data))
    }

    pub fn tokenize_var(&self, g: &mut Graph, img: Var) -> Result<Var> {
        self.check_image(g.value(img)?)?;
        g.gather(img, Arc::clone(&self.forward), &[self.n_tokens, self.token_dim])
    }

    pub fn detokenize_var(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        g.gather(tokens, Arc::clone(&self.inverse), &[self.height, self.width])
    }
}

pub fn patchify(img: &RealTensor, p: usize) -> Result<RealTensor> {
    let (h, w) = img.dims2()?;
    TokenLayout::new(TokenKind::Patch(p), h, w)?.tokenize(img)
}

pub fn unpatchify(tokens: &RealTensor, p: usize, height: usize, width: usize) -> Result<RealTensor> {
    TokenLayout::new(TokenKind::Patch(p), height, width)?.detokenize(tokens)
}

pub fn kd_tokenize(img: &RealTensor, p: usize) -> Result<RealTensor> {
    let (h, w) = img.dims2()?;
    TokenLayout::new(TokenKind::Kaleidoscope(p), h, w)?.tokenize(img)
}

pub fn kd_detokenize(tokens: &RealTensor, p: usize, side: usize) -> Result<RealTensor> {
    TokenLayout::new(TokenKind::Kaleidoscope(p), side, side)?.detokenize(tokens)
}

fn axial_kind(o: Orientation) -> TokenKind {
    match o {
        Orientation::Rows => TokenKind::AxialRows,
        Orientation::Cols => TokenKind::AxialCols,
    }
}

pub fn axial_tokenize(img: &RealTensor, orientation: Orientation) -> Result<RealTensor> {
    let (h, w) = img.dims2()?;
    TokenLayout::new(axial_kind(orientation), h, w)?.tokenize(img)
}

pub fn axial_detokenize(tokens: &RealTensor, orientation: Orientation, height: usize, width: usize) -> Result<RealTensor> {
    TokenLayout::new(axial_kind(orientation), height, width)?.detokenize(tokens)
}

/// Learned projection `E`, its learned inverse `iE` and the positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub projection: RealTensor,
    pub inverse_projection: RealTensor,
    pub positional: RealTensor,
}

impl EmbeddingParams {
    pub fn new(projection: RealTensor, inverse_projection: RealTensor, positional: RealTensor) -> Result<Self> {
        let (td, d) = projection.dims2()?;
        let (d2, td2) = inverse_projection.dims2()?;
        let (_, d3) = positional.dims2()?;
        if d != d2 || td != td2 || d != d3 {
            return Err(dim_err!(
                "embedding shapes disagree: E {:?}, iE {:?}, pos {:?}",
                projection.shape(),
                inverse_projection.shape(),
                positional.shape()
            ));
        }
        Ok(Self { projection, inverse_projection, positional })
    }

    /// `E = iE = I` and zero positions.
    pub fn identity(token_dim: usize, n_tokens: usize) -> Self {
        Self {
            projection: RealTensor::identity(token_dim),
            inverse_projection: RealTensor::identity(token_dim),
            positional: RealTensor::zeros(&[n_tokens, token_dim]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn names(prefix: &str) -> [String; 3] {
        [format!("{prefix}.proj"), format!("{prefix}.inv_proj"), format!("{prefix}.pos")]
    }

    pub fn register(self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let [p, ip, pos] = Self::names(prefix);
        store.insert(p, self.projection)?;
        store.insert(ip, self.inverse_projection)?;
        store.insert(pos, self.positional)
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let [p, ip, pos] = Self::names(prefix);
        let get = |n: &str| {
            store
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter {n}")))
        };
        Self::new(get(&p)?, get(&ip)?, get(&pos)?)
    }
}

/// Embedded tokens plus what is needed to put them back on the image grid.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: RealTensor,
    pub kind: TokenKind,
    pub height: usize,
    pub width: usize,
}

/// `tokens * E + positional`.
pub fn embed(raw_tokens: &RealTensor, layout: &TokenLayout, params: &EmbeddingParams) -> Result<TokenSequence> {
    let (n, td) = raw_tokens.dims2()?;
    if (n, td) != (layout.n_tokens, layout.token_dim) {
        return Err(dim_err!(
            "raw tokens {n}x{td} do not match the {} layout",
            layout.kind
        ));
    }
    if params.positional.dims2()?.0 != n {
        return Err(dim_err!("positional table has the wrong number of rows"));
    }
    let projected = ops::matmul(raw_tokens, &params.projection)?;
    let tokens = projected.zip_map(&params.positional, |a, b| a + b)?;
    Ok(TokenSequence { tokens, kind: layout.kind, height: layout.height, width: layout.width })
}

/// `iE` followed by the exact spatial inverse of the layout.
pub fn unembed(seq: &TokenSequence, params: &EmbeddingParams) -> Result<RealTensor> {
    let layout = TokenLayout::new(seq.kind, seq.height, seq.width)?;
    let raw = ops::matmul(&seq.tokens, &params.inverse_projection)?;
    layout.detokenize(&raw)
}

/// Graph version of [`embed`] reading `E` and the positional table from `store`.
pub fn embed_var(g: &mut Graph, store: &ParamStore, prefix: &str, raw: Var) -> Result<Var> {
    let [p, _, pos] = EmbeddingParams::names(prefix);
    let proj = g.param(store, &p)?;
    let pos = g.param(store, &pos)?;
    let x = g.matmul(raw, proj)?;
    g.add(x, pos)
}

/// Graph version of the learned inverse projection (no spatial inverse).
pub fn inverse_project_var(g: &mut Graph, store: &ParamStore, prefix: &str, tokens: Var) -> Result<Var> {
    let [_, ip, _] = EmbeddingParams::names(prefix);
    let inv = g.param(store, &ip)?;
    g.matmul(tokens, inv)
}
