//! The cascade: denoiser blocks alternating with k-space data consistency.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::denoiser::{BlockKind, BlockSpec, TnnBlock};
use crate::error::{config_err, dim_err, Result};
use crate::fft;
use crate::harness::mask::{apply_mask, SamplingMask};
use crate::tensor::{ComplexTensor, RealTensor};

/// How each data-consistency block weighs measured samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    /// Learnable `lambda = exp(rho)` per stage, starting at `init`.
    Learnable { init: f64 },
    /// `lambda -> infinity`: sampled coefficients are replaced by the measurements.
    Noiseless,
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaMode::Learnable { init } => write!(f, "learnable:{init}"),
            LambdaMode::Noiseless => write!(f, "noiseless"),
        }
    }
}

impl LambdaMode {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "noiseless" {
            return Ok(LambdaMode::Noiseless);
        }
        let init = match s.strip_prefix("learnable") {
            Some("") => 1.0,
            Some(rest) => rest
                .trim_start_matches(':')
                .parse::<f64>()
                .map_err(|_| config_err!("bad lambda mode {s:?}"))?,
            None => return Err(config_err!("bad lambda mode {s:?}")),
        };
        if !(init > 0.0 && init.is_finite()) {
            return Err(config_err!("initial lambda must be positive, got {init}"));
        }
        Ok(LambdaMode::Learnable { init })
    }
}

/// Width and depth shared by every block of a cascade.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Token side for patch and Kaleidoscope blocks.
    pub token_size: usize,
    pub d_model: usize,
    pub axial_d_model: usize,
    /// Encoder layers per block (`n_t`).
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width as a multiple of the block's `d_model`.
    pub ff_mult: usize,
}

impl ArchConfig {
    /// Paper-scale widths: 16x16 tokens, d_model 256 (320 for axial), n_t = 2.
    pub fn paper() -> Self {
        Self { token_size: 16, d_model: 256, axial_d_model: 320, n_layers: 2, n_heads: 8, ff_mult: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcConfig {
    pub n_d: usize,
    /// Block kinds, repeated cyclically when shorter than `n_d`.
    pub kinds: Vec<BlockKind>,
    pub lambda_mode: LambdaMode,
    pub arch: ArchConfig,
    pub height: usize,
    pub width: usize,
}

impl DcConfig {
    /// Named cascades: `patch4`, `kd4`, `axial3` and the `ax-kd-p` ensemble.
    pub fn preset(name: &str, height: usize, width: usize) -> Result<Self> {
        let (n_d, kinds) = match name {
            "patch4" => (4, vec![BlockKind::Patch]),
            "kd4" => (4, vec![BlockKind::Kaleidoscope]),
            "axial3" => (3, vec![BlockKind::Axial]),
            "ax-kd-p" => (3, vec![BlockKind::Axial, BlockKind::Kaleidoscope, BlockKind::Patch]),
            other => return Err(config_err!("unknown model preset {other:?}")),
        };
        Ok(Self {
            n_d,
            kinds,
            lambda_mode: LambdaMode::Learnable { init: 1.0 },
            arch: ArchConfig::paper(),
            height,
            width,
        })
    }

    pub fn stage_kind(&self, n: usize) -> BlockKind {
        self.kinds[n % self.kinds.len()]
    }

    pub fn block_spec(&self, n: usize) -> BlockSpec {
        let kind = self.stage_kind(n);
        let d_model = match kind {
            BlockKind::Axial => self.arch.axial_d_model,
            _ => self.arch.d_model,
        };
        BlockSpec {
            kind,
            token_size: self.arch.token_size,
            d_model,
            n_layers: self.arch.n_layers,
            n_heads: self.arch.n_heads,
            d_ff: self.arch.ff_mult * d_model,
            height: self.height,
            width: self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_d == 0 {
            return Err(config_err!("n_d must be at least 1"));
        }
        if self.kinds.is_empty() {
            return Err(config_err!("block kind list is empty"));
        }
        for n in 0..self.n_d {
            self.block_spec(n).validate()?;
        }
        Ok(())
    }
}

pub fn lambda_param_name(stage: usize) -> String {
    format!("stage{stage}.dc.rho")
}

#[derive(Clone, Debug)]
pub struct DcTnnModel {
    config: DcConfig,
    blocks: Vec<TnnBlock>,
    pub store: ParamStore,
}

/// Deterministically constructs a cascade with residual-identity blocks.
pub fn build_model(config: &DcConfig, seed: u64) -> Result<DcTnnModel> {
    let model = DcTnnModel::skeleton(config)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (n, block) in model.blocks.iter().enumerate() {
        block.init_params(&mut store, &mut rng)?;
        if let LambdaMode::Learnable { init } = config.lambda_mode {
            store.insert(lambda_param_name(n), RealTensor::scalar(init.ln()))?;
        }
    }
    Ok(DcTnnModel { store, ..model })
}

impl DcTnnModel {
    /// Blocks without parameters; used when loading checkpoints.
    pub(crate) fn skeleton(config: &DcConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_d)
            .map(|n| TnnBlock::new(config.block_spec(n), format!("stage{n}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), blocks, store: ParamStore::new() })
    }

    pub(crate) fn with_store(config: &DcConfig, store: ParamStore) -> Result<Self> {
        let model = Self::skeleton(config)?;
        let expected = model.expected_params();
        let missing: Vec<_> = expected.iter().filter(|n| !store.contains(n)).collect();
        if !missing.is_empty() || store.len() != expected.len() {
            return Err(config_err!(
                "parameter set does not match the manifest: {} expected, {} found, missing {:?}",
                expected.len(),
                store.len(),
                missing
            ));
        }
        Ok(Self { store, ..model })
    }

    /// Names of all parameters the configuration requires.
    pub fn expected_params(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (n, b) in self.blocks.iter().enumerate() {
            names.extend(b.param_names());
            if matches!(self.config.lambda_mode, LambdaMode::Learnable { .. }) {
                names.push(lambda_param_name(n));
            }
        }
        names
    }

    pub fn config(&self) -> &DcConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[TnnBlock] {
        &self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Current `lambda_n` of each stage; `None` in noiseless mode.
    pub fn lambdas(&self) -> Vec<Option<f64>> {
        (0..self.blocks.len())
            .map(|n| self.store.get(&lambda_param_name(n)).map(|r| r.data()[0].exp()))
            .collect()
    }

    /// Records the whole cascade on `g`, starting from the zero-filled image.
    pub fn forward_graph(&self, g: &mut Graph, y: &Arc<ComplexTensor>, sampled: &Arc<Vec<bool>>) -> Result<Var> {
        if y.shape() != [self.config.height, self.config.width] {
            return Err(dim_err!(
                "k-space {:?} does not match model geometry {}x{}",
                y.shape(),
                self.config.height,
                self.config.width
            ));
        }
        let x0 = fft::idft2(y)?.re();
        let mut x = g.constant(x0);
        for (n, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, &self.store, x)?;
            let lambda = match self.config.lambda_mode {
                LambdaMode::Learnable { .. } => {
                    let rho = g.param(&self.store, &lambda_param_name(n))?;
                    Some(g.exp(rho)?)
                }
                LambdaMode::Noiseless => None,
            };
            x = g.data_consistency(x, lambda, Arc::clone(y), Arc::clone(sampled))?;
        }
        Ok(x)
    }
}

fn mask_inputs(y: &ComplexTensor, mask: &SamplingMask) -> Result<(Arc<ComplexTensor>, Arc<Vec<bool>>)> {
    let (h, w) = y.dims2()?;
    if w != mask.width() {
        return Err(dim_err!("k-space has {w} columns, mask has {}", mask.width()));
    }
    Ok((Arc::new(apply_mask(y, mask)?), Arc::new(mask.expand(h))))
}

/// Runs the cascade on measured k-space `y`.
pub fn dctnn_forward(model: &DcTnnModel, y: &ComplexTensor, mask: &SamplingMask) -> Result<RealTensor> {
    let (y, sampled) = mask_inputs(y, mask)?;
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &y, &sampled)?;
    Ok(g.value(out)?.clone())
}

/// Real part of the inverse DFT of the measured samples.
pub fn zero_filled(y: &ComplexTensor, mask: &SamplingMask) -> Result<RealTensor> {
    let (y, _) = mask_inputs(y, mask)?;
    Ok(fft::idft2(&y)?.re())
}

/// Data consistency on one image; `lambda = None` is the noiseless limit.
pub fn dc_apply(xhat: &RealTensor, y: &ComplexTensor, mask: &SamplingMask, lambda: Option<f64>) -> Result<RealTensor> {
    if xhat.shape() != y.shape() {
        return Err(dim_err!("image {:?} vs k-space {:?}", xhat.shape(), y.shape()));
    }
    if let Some(l) = lambda {
        if !(l > 0.0 && l.is_finite()) {
            return Err(config_err!("lambda must be positive and finite, got {l}"));
        }
    }
    let (y, sampled) = mask_inputs(y, mask)?;
    let mut g = Graph::new();
    let x = g.constant(xhat.clone());
    let lam = lambda.map(|l| g.constant(RealTensor::scalar(l)));
    let out = g.data_consistency(x, lam, y, sampled)?;
    Ok(g.value(out)?.clone())
}
