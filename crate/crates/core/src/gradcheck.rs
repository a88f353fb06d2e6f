//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor (all of them when smaller).
    pub coords_per_tensor: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, coords_per_tensor: 20, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.rel_error)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.probes.iter().all(|p| p.rel_error < tolerance)
    }
}

fn scalar_loss(store: &ParamStore, loss: &impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let v = g.value(l)?;
    if v.len() != 1 {
        return Err(Error::Contract(format!("loss must be a scalar, got shape {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares backpropagated gradients of every parameter in `store` against
/// central differences of the scalar `loss`.
pub fn check_gradients(
    store: &mut ParamStore,
    loss: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    store.zero_grads();
    {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        g.backward(l, store)?;
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.len());
        let indices: Vec<usize> = if n <= config.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, config.coords_per_tensor).into_vec()
        };
        for index in indices {
            let analytic = store.grad(&name).expect("parameter listed by the store").data()[index];
            let original = store.get(&name).expect("parameter listed by the store").data()[index];
            store.value_mut(&name).expect("parameter listed by the store")[index] = original + config.step;
            let plus = scalar_loss(store, &loss);
            store.value_mut(&name).expect("parameter listed by the store")[index] = original - config.step;
            let minus = scalar_loss(store, &loss);
            store.value_mut(&name).expect("parameter listed by the store")[index] = original;
            let numeric = (plus? - minus?) / (2.0 * config.step);
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(config.floor);
            report.probes.push(Probe { name: name.clone(), index, analytic, numeric, rel_error });
        }
    }
    Ok(report)
}
