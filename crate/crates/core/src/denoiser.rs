//! Transformer denoiser blocks.
//!
//! A block tokenises its input image, embeds the tokens, runs `n_layers`
//! pre-norm encoder layers, projects back with the learned inverse embedding,
//! restores the spatial layout and adds the result to the input. Axial blocks
//! do this twice (rows, then columns) with one embedding per orientation and a
//! single encoder stack shared by both passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::RealTensor;
use crate::tokenizer::{embed_var, inverse_project_var, EmbeddingParams, TokenKind, TokenLayout};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Patch,
    Kaleidoscope,
    Axial,
}

impl BlockKind {
    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::Patch => "patch",
            BlockKind::Kaleidoscope => "kd",
            BlockKind::Axial => "axial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "patch" | "p" => Ok(BlockKind::Patch),
            "kd" | "kaleidoscope" => Ok(BlockKind::Kaleidoscope),
            "axial" | "ax" => Ok(BlockKind::Axial),
            other => Err(config_err!("unknown block kind {other:?}")),
        }
    }
}

/// Geometry and width of one denoiser block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Token side `p` for patch and Kaleidoscope blocks; unused for axial.
    pub token_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(config_err!("a denoiser block needs at least one encoder layer"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(config_err!(
                "d_model {} is not divisible by {} heads",
                self.d_model,
                self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return Err(config_err!("d_ff must be positive"));
        }
        for kind in self.token_kinds() {
            TokenLayout::new(kind, self.height, self.width)?;
        }
        Ok(())
    }

    /// Token layouts visited by the block, in execution order.
    pub fn token_kinds(&self) -> Vec<TokenKind> {
        match self.kind {
            BlockKind::Patch => vec![TokenKind::Patch(self.token_size)],
            BlockKind::Kaleidoscope => vec![TokenKind::Kaleidoscope(self.token_size)],
            BlockKind::Axial => vec![TokenKind::AxialRows, TokenKind::AxialCols],
        }
    }

    /// Learnable scalars in one encoder layer.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    }
}

/// Per-layer parameter suffixes, in registration order.
const LAYER_PARAMS: [&str; 16] = [
    "ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2",
];

/// Draws from N(0, std^2) truncated at two standard deviations.
pub fn truncated_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> RealTensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    RealTensor::from_parts(shape.to_vec(), data)
}

/// Registers one encoder layer. Output projections start at zero so the
/// layer is an exact residual identity at initialisation.
pub fn init_encoder_layer(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Result<()> {
    for name in LAYER_PARAMS {
        let value = match name {
            "ln1.g" | "ln2.g" => RealTensor::full(&[d], 1.0),
            "wq" | "wk" | "wv" => truncated_normal(rng, &[d, d], INIT_STD),
            "w1" => truncated_normal(rng, &[d, d_ff], INIT_STD),
            "wo" => RealTensor::zeros(&[d, d]),
            "w2" => RealTensor::zeros(&[d_ff, d]),
            "b1" => RealTensor::zeros(&[d_ff]),
            _ => RealTensor::zeros(&[d]),
        };
        store.insert(format!("{prefix}.{name}"), value)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product self-attention without masking.
pub fn mha(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, n_heads: usize) -> Result<Var> {
    let (_, d) = g.value(x)?.dims2()?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(dim_err!("width {d} not divisible by {n_heads} heads"));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let proj = |g: &mut Graph, w: &str, b: &str| -> Result<Var> {
        let w = g.param(store, &format!("{prefix}.{w}"))?;
        let b = g.param(store, &format!("{prefix}.{b}"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    };
    let q = proj(g, "wq", "bq")?;
    let k = proj(g, "wk", "bk")?;
    let v = proj(g, "wv", "bv")?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 1)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let bo = g.param(store, &format!("{prefix}.bo"))?;
    let out = g.matmul(cat, wo)?;
    g.add_row(out, bo)
}

/// `x + mha(ln1(x))`, then `+ ffn(ln2(.))` with a GELU hidden layer.
pub fn encoder_layer(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, n_heads: usize) -> Result<Var> {
    let p = |n: &str| format!("{prefix}.{n}");
    let (g1, b1) = (g.param(store, &p("ln1.g"))?, g.param(store, &p("ln1.b"))?);
    let h = g.layer_norm(x, g1, b1, LN_EPS)?;
    let a = mha(g, store, prefix, h, n_heads)?;
    let x = g.add(x, a)?;

    let (g2, b2) = (g.param(store, &p("ln2.g"))?, g.param(store, &p("ln2.b"))?);
    let h = g.layer_norm(x, g2, b2, LN_EPS)?;
    let w1 = g.param(store, &p("w1"))?;
    let bb1 = g.param(store, &p("b1"))?;
    let h = g.matmul(h, w1)?;
    let h = g.add_row(h, bb1)?;
    let h = g.gelu(h)?;
    let w2 = g.param(store, &p("w2"))?;
    let bb2 = g.param(store, &p("b2"))?;
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, bb2)?;
    g.add(x, h)
}

pub fn encoder_stack(g: &mut Graph, store: &ParamStore, prefix: &str, n_layers: usize, n_heads: usize, x: Var) -> Result<Var> {
    let mut x = x;
    for l in 0..n_layers {
        x = encoder_layer(g, store, &format!("{prefix}.layer{l}"), x, n_heads)?;
    }
    Ok(x)
}

/// One residual transformer denoiser `f(x) = x + correction(x)`.
#[derive(Clone, Debug)]
pub struct TnnBlock {
    spec: BlockSpec,
    prefix: String,
    layouts: Vec<TokenLayout>,
}

impl TnnBlock {
    pub fn new(spec: BlockSpec, prefix: impl Into<String>) -> Result<Self> {
        spec.validate()?;
        let layouts = spec
            .token_kinds()
            .into_iter()
            .map(|k| TokenLayout::new(k, spec.height, spec.width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, prefix: prefix.into(), layouts })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn layouts(&self) -> &[TokenLayout] {
        &self.layouts
    }

    fn embed_prefix(&self, pass: usize) -> String {
        match self.spec.kind {
            BlockKind::Axial => format!("{}.{}.embed", self.prefix, ["rows", "cols"][pass]),
            _ => format!("{}.embed", self.prefix),
        }
    }

    pub fn encoder_prefix(&self) -> String {
        format!("{}.enc", self.prefix)
    }

    /// Registers every parameter of the block with near-identity initial values.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let d = self.spec.d_model;
        for (pass, layout) in self.layouts.iter().enumerate() {
            let emb = EmbeddingParams {
                projection: truncated_normal(rng, &[layout.token_dim(), d], INIT_STD),
                inverse_projection: RealTensor::zeros(&[d, layout.token_dim()]),
                positional: truncated_normal(rng, &[layout.n_tokens(), d], INIT_STD),
            };
            emb.register(store, &self.embed_prefix(pass))?;
        }
        for l in 0..self.spec.n_layers {
            init_encoder_layer(store, &format!("{}.layer{l}", self.encoder_prefix()), d, self.spec.d_ff, rng)?;
        }
        Ok(())
    }

    /// Parameter names owned by the block, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for pass in 0..self.layouts.len() {
            names.extend(EmbeddingParams::names(&self.embed_prefix(pass)));
        }
        for l in 0..self.spec.n_layers {
            for n in LAYER_PARAMS {
                names.push(format!("{}.layer{l}.{n}", self.encoder_prefix()));
            }
        }
        names
    }

    /// Parameter names of the final projection of every sublayer and of the
    /// inverse embedding; zeroing these makes the block an exact identity.
    pub fn output_projection_names(&self) -> Vec<String> {
        self.param_names()
            .into_iter()
            .filter(|n| [".wo", ".bo", ".w2", ".b2", ".inv_proj"].iter().any(|s| n.ends_with(s)))
            .collect()
    }

    /// Analytic learnable-scalar count.
    pub fn param_count(&self) -> usize {
        let d = self.spec.d_model;
        let embed: usize = self
            .layouts
            .iter()
            .map(|l| 2 * l.token_dim() * d + l.n_tokens() * d)
            .sum();
        embed + self.spec.n_layers * self.spec.layer_param_count()
    }

    /// Records the block on `g` and returns the denoised image.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Result<Var> {
        let mut x = img;
        for (pass, layout) in self.layouts.iter().enumerate() {
            let raw = layout.tokenize_var(g, x)?;
            let emb = self.embed_prefix(pass);
            let tokens = embed_var(g, store, &emb, raw)?;
            let encoded = encoder_stack(g, store, &self.encoder_prefix(), self.spec.n_layers, self.spec.n_heads, tokens)?;
            let back = inverse_project_var(g, store, &emb, encoded)?;
            let correction = layout.detokenize_var(g, back)?;
            x = g.add(x, correction)?;
        }
        Ok(x)
    }
}

/// Applies one block to an image outside of any training graph.
pub fn tnn_denoise(img: &RealTensor, block: &TnnBlock, store: &ParamStore) -> Result<RealTensor> {
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let y = block.forward(&mut g, store, x)?;
    Ok(g.value(y)?.clone())
}

/// Number of learnable scalars held by a parameter store.
pub fn param_count(store: &ParamStore) -> usize {
    store.num_scalars()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(kind: BlockKind) -> BlockSpec {
        BlockSpec { kind, token_size: 4, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, height: 8, width: 8 }
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> RealTensor {
        RealTensor::from_fn2(n, n, |_, _| rng.random::<f64>())
    }

    /// Fills every parameter with fresh random values.
    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            for v in store.value_mut(&n).unwrap() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }

    fn mha_oracle(x: &RealTensor, store: &ParamStore, prefix: &str, heads: usize) -> RealTensor {
        let p = |n: &str| store.get(&format!("{prefix}.{n}")).unwrap().clone();
        let (n, d) = x.dims2().unwrap();
        let dh = d / heads;
        let lin = |w: &RealTensor, b: &RealTensor| {
            RealTensor::from_fn2(n, d, |i, j| b.data()[j] + (0..d).map(|k| x.get2(i, k) * w.get2(k, j)).sum::<f64>())
        };
        let q = lin(&p("wq"), &p("bq"));
        let k = lin(&p("wk"), &p("bk"));
        let v = lin(&p("wv"), &p("bv"));
        let mut cat = RealTensor::zeros(&[n, d]);
        for h in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|c| q.get2(i, h * dh + c) * k.get2(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..dh {
                    let val: f64 = (0..n).map(|j| logits[j].exp() / z * v.get2(j, h * dh + c)).sum();
                    cat.data_mut()[i * d + h * dh + c] = val;
                }
            }
        }
        let (wo, bo) = (p("wo"), p("bo"));
        RealTensor::from_fn2(n, d, |i, j| bo.data()[j] + (0..d).map(|k| cat.get2(i, k) * wo.get2(k, j)).sum::<f64>())
    }

    #[test]
    fn mha_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "l", 8, 16, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let x = RealTensor::from_fn2(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = mha(&mut g, &store, "l", xv, 2).unwrap();
        assert!(g.value(y).unwrap().max_abs_diff(&mha_oracle(&x, &store, "l", 2)) < 1e-10);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "l", 4, 8, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let x = RealTensor::from_fn2(1, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = mha(&mut g, &store, "l", xv, 2).unwrap();
        let p = |n: &str| {
            let t = store.get(&format!("l.{n}")).unwrap().clone();
            if t.rank() == 1 { t.reshape(&[1, t.len()]).unwrap() } else { t }
        };
        let v = ops::matmul(&x, &p("wv")).unwrap().zip_map(&p("bv"), |a, b| a + b).unwrap();
        let expect = ops::matmul(&v, &p("wo")).unwrap().zip_map(&p("bo"), |a, b| a + b).unwrap();
        assert!(g.value(y).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "l", 4, 8, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = RealTensor::from_fn2(5, 4, |_, j| row[j]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let q = g.param(&store, "l.wq").unwrap();
        let k = g.param(&store, "l.wk").unwrap();
        let qx = g.matmul(xv, q).unwrap();
        let kx = g.matmul(xv, k).unwrap();
        let s = g.matmul_nt(qx, kx).unwrap();
        let a = g.softmax(s, 1).unwrap();
        assert!(g.value(a).unwrap().data().iter().all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn zero_weights_leave_the_residual_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "l", 8, 16, &mut rng).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            store.value_mut(&n).unwrap().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = RealTensor::from_fn2(3, 8, |_, _| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = encoder_layer(&mut g, &store, "l", xv, 2).unwrap();
        assert_eq!(g.value(y).unwrap(), &x);
    }

    #[test]
    fn fresh_blocks_are_exact_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 8);
        for kind in [BlockKind::Patch, BlockKind::Kaleidoscope, BlockKind::Axial] {
            let block = TnnBlock::new(spec(kind), "b").unwrap();
            let mut store = ParamStore::new();
            block.init_params(&mut store, &mut rng).unwrap();
            assert_eq!(tnn_denoise(&img, &block, &store).unwrap(), img);
        }
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 8);
        for kind in [BlockKind::Patch, BlockKind::Kaleidoscope, BlockKind::Axial] {
            let block = TnnBlock::new(spec(kind), "b").unwrap();
            let mut store = ParamStore::new();
            block.init_params(&mut store, &mut rng).unwrap();
            randomize(&mut store, &mut rng);
            let out = tnn_denoise(&img, &block, &store).unwrap();
            assert_eq!(out.shape(), &[8, 8]);
            assert!(out.max_abs_diff(&img) > 1e-3);
            for n in block.output_projection_names() {
                store.value_mut(&n).unwrap().iter_mut().for_each(|v| *v = 0.0);
            }
            assert_eq!(tnn_denoise(&img, &block, &store).unwrap(), img);
        }
    }

    #[test]
    fn analytic_count_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in [BlockKind::Patch, BlockKind::Kaleidoscope, BlockKind::Axial] {
            let block = TnnBlock::new(spec(kind), "b").unwrap();
            let mut store = ParamStore::new();
            block.init_params(&mut store, &mut rng).unwrap();
            assert_eq!(block.param_count(), param_count(&store));
            assert_eq!(block.param_names(), store.names().map(String::from).collect::<Vec<_>>());
        }
    }

    #[test]
    fn linear_layer_count() {
        assert_eq!(param_count(&ParamStore::new()), 0);
        let mut store = ParamStore::new();
        store.insert("w", RealTensor::zeros(&[2, 3])).unwrap();
        store.insert("b", RealTensor::zeros(&[3])).unwrap();
        assert_eq!(param_count(&store), 9);
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(BlockKind::Patch);
        s.n_heads = 3;
        assert!(TnnBlock::new(s, "b").is_err());
        let mut s = spec(BlockKind::Kaleidoscope);
        s.token_size = 3;
        assert!(TnnBlock::new(s, "b").is_err());
        let mut s = spec(BlockKind::Axial);
        s.n_layers = 0;
        assert!(TnnBlock::new(s, "b").is_err());
    }

    #[test]
    fn truncated_normal_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = truncated_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum() / 1000.0;
        assert!(mean.abs() < 0.003);
    }
}
