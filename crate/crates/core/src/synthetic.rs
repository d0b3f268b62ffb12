//! Synthetic scenarios with known dependence structure, and their closed-form
//! oracles.
//!
//! * Toy scenario: binary `y`, standard-normal sensitive `s`, two features
//!   whose class-1 mean carries a `3 sin s` shift.
//! * Arctan scenario: `y ~ N(mu, sigma²)`, `x = atan(y²) + uπ` with
//!   `u ~ Bernoulli(½)`. `tan(x) = y²` so the pair is strictly dependent,
//!   yet neither variable is a function of the other.
//! * Symmetric-bias scenario: the label depends on `s²`, so any predictor
//!   built from the features satisfies `E(s | ŷ) = E(s)` while still being
//!   strongly dependent on `s`.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::pearson;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyScenarioParams {
    pub n: usize,
    pub seed: u64,
}

pub fn gen_toy(params: ToyScenarioParams) -> Dataset {
    let n = params.n;
    let mut rng = SeededRng::new(params.seed);
    let mut x = Array2::zeros((n, 2));
    let mut s = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    let off = 0.75f64.sqrt();
    for i in 0..n {
        let label = rng.bernoulli(0.5);
        let sv = rng.normal();
        let (z1, z2) = (rng.normal(), rng.normal());
        let (x1, x2) = if label {
            (1.0 + z1, 1.0 + 3.0 * sv.sin() + z2)
        } else {
            // Cholesky factor of [[1, -1/2], [-1/2, 1]]
            (z1, -0.5 * z1 + off * z2)
        };
        x[[i, 0]] = x1;
        x[[i, 1]] = x2;
        s[[i, 0]] = sv;
        y[[i, 0]] = f64::from(u8::from(label));
    }
    Dataset::new(x, s, y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetricBiasParams {
    pub n: usize,
    pub seed: u64,
}

/// `s, u ~ N(0, 1)`, features `(u, atan(s²) + 0.05·e)`, label
/// `1{0.5u + s² + 0.2·e' > 1}`. The joint law is invariant under `s → −s`.
pub fn gen_symmetric_bias(params: SymmetricBiasParams) -> Dataset {
    let n = params.n;
    let mut rng = SeededRng::new(params.seed);
    let mut x = Array2::zeros((n, 2));
    let mut s = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        let sv = rng.normal();
        let u = rng.normal();
        let sq = sv * sv;
        x[[i, 0]] = u;
        x[[i, 1]] = sq.atan() + 0.05 * rng.normal();
        s[[i, 0]] = sv;
        y[[i, 0]] = f64::from(u8::from(0.5 * u + sq + 0.2 * rng.normal() > 1.0));
    }
    Dataset::new(x, s, y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArctanScenarioParams {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
}

impl ArctanScenarioParams {
    pub fn alpha(&self) -> f64 {
        self.mu / self.sigma
    }
}

/// Columns `(x, y)` of the arctan scenario.
pub fn gen_arctan(params: ArctanScenarioParams) -> Result<(Array1<f64>, Array1<f64>)> {
    if !(params.sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {}",
            params.sigma
        )));
    }
    let mut rng = SeededRng::new(params.seed);
    let mut x = Array1::zeros(params.n);
    let mut y = Array1::zeros(params.n);
    for i in 0..params.n {
        let yv = rng.normal_with(params.mu, params.sigma);
        let shift = if rng.bernoulli(0.5) { std::f64::consts::PI } else { 0.0 };
        x[i] = (yv * yv).atan() + shift;
        y[i] = yv;
    }
    Ok((x, y))
}

/// `E(Y | X) = tanh(mu/sigma² · √tan X) · √tan X` for the arctan scenario.
pub fn oracle_conditional_expectation(
    x: ArrayView1<f64>,
    mu: f64,
    sigma: f64,
) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(x.len());
    for (o, &xv) in out.iter_mut().zip(x.iter()) {
        let t = xv.tan();
        if t < -1e-6 {
            return Err(Error::InvalidArgument(format!(
                "x = {xv} outside scenario support (tan x = {t})"
            )));
        }
        let r = t.max(0.0).sqrt();
        *o = (mu / (sigma * sigma) * r).tanh() * r;
    }
    Ok(out)
}

/// Analytic bounds on `ρ(E(Y|X), Y)` as a function of `alpha = mu / sigma`.
pub fn oracle_simplified_hgr_bounds(alpha: f64) -> (f64, f64) {
    let e = (-alpha * alpha / 2.0).exp();
    let lower = (1.0 - e).max(0.0).sqrt();
    let upper = (1.0 - e * (1.0 + alpha * alpha).powf(-1.5)).max(0.0).sqrt();
    (lower, upper)
}

/// Monte-Carlo `ρ(tanh(αY)·Y, Y)` with `Y ~ N(α, 1)`. Returns 0 when the
/// conditional expectation is constant (α = 0).
pub fn oracle_mc_simplified_hgr(alpha: f64, n_mc: usize, seed: u64) -> Result<f64> {
    if n_mc < 1000 {
        return Err(Error::InvalidArgument(format!("n_mc must be ≥ 1000, got {n_mc}")));
    }
    let mut rng = SeededRng::new(seed);
    let y = Array1::from_shape_simple_fn(n_mc, || rng.normal_with(alpha, 1.0));
    let cond = y.mapv(|v| (alpha * v).tanh() * v);
    match pearson(cond.view(), y.view()) {
        Ok(r) => Ok(r),
        Err(Error::Degenerate(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}
