#![allow(dead_code)]

use std::sync::Arc;

use dctnn_core::denoiser::{encoder_layer, init_encoder_layer, mha, BlockKind, BlockSpec, TnnBlock};
use dctnn_core::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use dctnn_core::harness::mask::{gaussian1d_mask, undersample, SamplingMask};
use dctnn_core::harness::phantom::phantom_generate;
use dctnn_core::kaleidoscope::{kt_index_map, KtParams};
use dctnn_core::recon::{build_model, ArchConfig, DcConfig, LambdaMode};
use dctnn_core::{Graph, ParamStore, RealTensor, Result, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> RealTensor {
    let n = shape.iter().product();
    RealTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[0.2, 1]` with random signs, away from the kink of `abs`.
pub fn signed_away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> RealTensor {
    uniform(rng, shape, 0.2, 1.0).zip_map(&uniform(rng, shape, -1.0, 1.0), |a, s| a * s.signum()).unwrap()
}

/// Adds uniform noise in `[-scale, scale]` to every parameter.
pub fn perturb(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for v in store.value_mut(&n).unwrap() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// `sum(v * w)` for a fixed random weight tensor `w`.
pub fn probe(g: &mut Graph, v: Var, w: &RealTensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(v, wv)?;
    g.sum(p)
}

pub type Case = (String, GradCheckReport);

fn run(name: &str, store: &mut ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> Case {
    let cfg = GradCheckConfig::default();
    (name.to_string(), check_gradients(store, f, &cfg).unwrap())
}

fn store_of(entries: Vec<(&str, RealTensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).unwrap();
    }
    s
}

pub fn tiny_arch(d: usize, p: usize) -> ArchConfig {
    ArchConfig { token_size: p, d_model: d, axial_d_model: d, n_layers: 1, n_heads: 2, ff_mult: 2 }
}

/// Gradient checks over every differentiable tape operation, the denoiser
/// blocks and a two-stage cascade at 32x32.
pub fn gradient_cases() -> Vec<Case> {
    let mut r = rng(11);
    let mut cases = Vec::new();

    let w35 = uniform(&mut r, &[3, 5], -1.0, 1.0);
    let mut s = store_of(vec![("a", uniform(&mut r, &[3, 4], -1.0, 1.0)), ("b", uniform(&mut r, &[4, 5], -1.0, 1.0))]);
    cases.push(run("matmul", &mut s, |g, st| {
        let (a, b) = (g.param(st, "a")?, g.param(st, "b")?);
        let m = g.matmul(a, b)?;
        probe(g, m, &w35)
    }));
    let mut s = store_of(vec![("a", uniform(&mut r, &[3, 4], -1.0, 1.0)), ("b", uniform(&mut r, &[5, 4], -1.0, 1.0))]);
    cases.push(run("matmul_nt", &mut s, |g, st| {
        let (a, b) = (g.param(st, "a")?, g.param(st, "b")?);
        let m = g.matmul_nt(a, b)?;
        probe(g, m, &w35)
    }));

    let w34 = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let pair = |r: &mut ChaCha8Rng| {
        store_of(vec![("a", signed_away_from_zero(r, &[3, 4])), ("b", signed_away_from_zero(r, &[3, 4]))])
    };
    type Binary = fn(&mut Graph, Var, Var) -> Result<Var>;
    let binaries: [(&str, Binary); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("mae", |g, a, b| {
            let m = g.mae(a, b)?;
            g.scale(m, 3.0)
        }),
    ];
    for (name, op) in binaries {
        let mut s = pair(&mut r);
        if name == "mae" {
            // keep every difference away from zero
            let b = s.get("a").unwrap().map(|v| v + 0.5);
            s.set("b", b).unwrap();
        }
        cases.push(run(name, &mut s, |g, st| {
            let (a, b) = (g.param(st, "a")?, g.param(st, "b")?);
            let y = op(g, a, b)?;
            if g.value(y)?.len() == 1 {
                Ok(y)
            } else {
                probe(g, y, &w34)
            }
        }));
    }

    type Unary = fn(&mut Graph, Var) -> Result<Var>;
    let unaries: [(&str, Unary); 11] = [
        ("scale", |g, a| g.scale(a, -1.7)),
        ("gelu", |g, a| g.gelu(a)),
        ("exp", |g, a| g.exp(a)),
        ("abs", |g, a| g.abs(a)),
        ("square", |g, a| g.square(a)),
        ("softmax_rows", |g, a| g.softmax(a, 1)),
        ("softmax_cols", |g, a| g.softmax(a, 0)),
        ("reshape", |g, a| {
            let y = g.reshape(a, &[4, 3])?;
            g.reshape(y, &[3, 4])
        }),
        ("transpose", |g, a| {
            let y = g.transpose(a)?;
            let y = g.square(y)?;
            g.transpose(y)
        }),
        ("slice_concat", |g, a| {
            let l = g.slice_cols(a, 0, 1)?;
            let m = g.slice_cols(a, 1, 2)?;
            let rr = g.slice_cols(a, 3, 1)?;
            let m2 = g.square(m)?;
            g.concat_cols(&[rr, m2, l])
        }),
        ("mean", |g, a| {
            let s = g.square(a)?;
            let m = g.mean(s)?;
            let t = g.sum(a)?;
            g.mul(m, t)
        }),
    ];
    for (name, op) in unaries {
        let mut s = store_of(vec![("a", signed_away_from_zero(&mut r, &[3, 4]))]);
        cases.push(run(name, &mut s, |g, st| {
            let a = g.param(st, "a")?;
            let y = op(g, a)?;
            if g.value(y)?.len() == 1 {
                Ok(y)
            } else {
                probe(g, y, &w34)
            }
        }));
    }

    let mut s = store_of(vec![("x", uniform(&mut r, &[3, 4], -1.0, 1.0)), ("b", uniform(&mut r, &[4], -1.0, 1.0))]);
    cases.push(run("add_row", &mut s, |g, st| {
        let (x, b) = (g.param(st, "x")?, g.param(st, "b")?);
        let y = g.add_row(x, b)?;
        let y = g.square(y)?;
        probe(g, y, &w34)
    }));

    let mut s = store_of(vec![
        ("x", uniform(&mut r, &[3, 4], -1.0, 1.0)),
        ("gain", uniform(&mut r, &[4], 0.5, 1.5)),
        ("bias", uniform(&mut r, &[4], -0.5, 0.5)),
    ]);
    cases.push(run("layer_norm", &mut s, |g, st| {
        let (x, ga, b) = (g.param(st, "x")?, g.param(st, "gain")?, g.param(st, "bias")?);
        let y = g.layer_norm(x, ga, b, 1e-5)?;
        probe(g, y, &w34)
    }));

    let kt = KtParams::new(4, 8, 8).unwrap();
    let idx = Arc::new(kt_index_map(&kt));
    let w_kt = uniform(&mut r, &[16, 4], -1.0, 1.0);
    let mut s = store_of(vec![("img", uniform(&mut r, &[8, 8], -1.0, 1.0))]);
    cases.push(run("kt_gather", &mut s, |g, st| {
        let x = g.param(st, "img")?;
        let sq = g.square(x)?;
        let y = g.gather(sq, Arc::clone(&idx), &[16, 4])?;
        probe(g, y, &w_kt)
    }));

    // data consistency on a mask that is deliberately not conjugate-symmetric
    let (h, w) = (8, 8);
    let cols: Vec<bool> = (0..w).map(|_| r.random_bool(0.5)).collect();
    let mask = SamplingMask::from_columns(cols).unwrap();
    let y = Arc::new(undersample(&uniform(&mut r, &[h, w], 0.0, 1.0), &mask).unwrap());
    let sampled = Arc::new(mask.expand(h));
    let w_img = uniform(&mut r, &[h, w], -1.0, 1.0);
    let mut s = store_of(vec![("x", uniform(&mut r, &[h, w], 0.0, 1.0)), ("rho", RealTensor::scalar(0.3))]);
    cases.push(run("data_consistency", &mut s, |g, st| {
        let x = g.param(st, "x")?;
        let rho = g.param(st, "rho")?;
        let lam = g.exp(rho)?;
        let z = g.data_consistency(x, Some(lam), Arc::clone(&y), Arc::clone(&sampled))?;
        probe(g, z, &w_img)
    }));
    let mut s = store_of(vec![("x", uniform(&mut r, &[h, w], 0.0, 1.0))]);
    cases.push(run("data_consistency_noiseless", &mut s, |g, st| {
        let x = g.param(st, "x")?;
        let z = g.data_consistency(x, None, Arc::clone(&y), Arc::clone(&sampled))?;
        let z = g.square(z)?;
        probe(g, z, &w_img)
    }));

    let mut s = ParamStore::new();
    init_encoder_layer(&mut s, "enc", 8, 16, &mut r).unwrap();
    perturb(&mut s, &mut r, 0.3);
    s.insert("x", uniform(&mut r, &[5, 8], -1.0, 1.0)).unwrap();
    let w58 = uniform(&mut r, &[5, 8], -1.0, 1.0);
    cases.push(run("multi_head_attention", &mut s, |g, st| {
        let x = g.param(st, "x")?;
        let y = mha(g, st, "enc", x, 2)?;
        probe(g, y, &w58)
    }));
    cases.push(run("encoder_layer", &mut s, |g, st| {
        let x = g.param(st, "x")?;
        let y = encoder_layer(g, st, "enc", x, 2)?;
        probe(g, y, &w58)
    }));

    let w16 = uniform(&mut r, &[16, 16], -1.0, 1.0);
    for kind in [BlockKind::Patch, BlockKind::Kaleidoscope, BlockKind::Axial] {
        let spec = BlockSpec { kind, token_size: 4, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, height: 16, width: 16 };
        let block = TnnBlock::new(spec, "blk").unwrap();
        let mut s = ParamStore::new();
        block.init_params(&mut s, &mut r).unwrap();
        perturb(&mut s, &mut r, 0.2);
        s.insert("img", uniform(&mut r, &[16, 16], 0.0, 1.0)).unwrap();
        cases.push(run(&format!("block_{}", kind.name()), &mut s, |g, st| {
            let x = g.param(st, "img")?;
            let y = block.forward(g, st, x)?;
            probe(g, y, &w16)
        }));
    }

    let (model, y, mask) = cascade_fixture(32, 3);
    let sampled = Arc::new(mask.expand(32));
    let y = Arc::new(y);
    let target = phantom_generate(32, 32, 99).unwrap().image;
    let mut store = model.store.clone();
    cases.push(run("cascade_nd2", &mut store, |g, st| {
        let mut m = model.clone();
        m.store = st.clone();
        let out = m.forward_graph(g, &y, &sampled)?;
        let t = g.constant(target.clone());
        let d = g.sub(out, t)?;
        let d = g.square(d)?;
        g.mean(d)
    }));
    cases.push(run("cascade_nd2_mae", &mut store, |g, st| {
        let mut m = model.clone();
        m.store = st.clone();
        let out = m.forward_graph(g, &y, &sampled)?;
        let t = g.constant(target.clone());
        g.mae(out, t)
    }));
    cases
}

/// A perturbed two-stage KD + patch cascade with learnable lambda, measured
/// k-space of a phantom and the R=4 mask.
pub fn cascade_fixture(side: usize, seed: u64) -> (dctnn_core::recon::DcTnnModel, dctnn_core::ComplexTensor, SamplingMask) {
    let config = DcConfig {
        n_d: 2,
        kinds: vec![BlockKind::Kaleidoscope, BlockKind::Patch],
        lambda_mode: LambdaMode::Learnable { init: 0.7 },
        arch: tiny_arch(8, 8),
        height: side,
        width: side,
    };
    let mut model = build_model(&config, seed).unwrap();
    perturb(&mut model.store, &mut rng(seed + 100), 0.1);
    let mask = gaussian1d_mask(side, 4.0, 0.04, seed).unwrap();
    let y = undersample(&phantom_generate(side, side, seed).unwrap().image, &mask).unwrap();
    (model, y, mask)
}

/// Mean squared error written out with explicit loops.
pub fn oracle_mse(x: &RealTensor, r: &RealTensor) -> f64 {
    let (h, w) = x.dims2().unwrap();
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            s += (x.get2(i, j) - r.get2(i, j)).powi(2);
        }
    }
    s / (h * w) as f64
}

/// SSIM with a direct 2D window sum at every valid position.
pub fn oracle_ssim(x: &RealTensor, r: &RealTensor) -> f64 {
    let (h, w) = x.dims2().unwrap();
    let (k, sigma) = (11usize, 1.5f64);
    let c = 5.0;
    let mut win = vec![vec![0.0; k]; k];
    let mut z = 0.0;
    for (u, row) in win.iter_mut().enumerate() {
        for (v, cell) in row.iter_mut().enumerate() {
            *cell = (-((u as f64 - c).powi(2) + (v as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
            z += *cell;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    mx += win[u][v] / z * x.get2(i + u, j + v);
                    my += win[u][v] / z * r.get2(i + u, j + v);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    let a = x.get2(i + u, j + v) - mx;
                    let b = r.get2(i + u, j + v) - my;
                    vx += win[u][v] / z * a * a;
                    vy += win[u][v] / z * b * b;
                    cxy += win[u][v] / z * a * b;
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}
