//! Dependence measures and fairness metrics.
//!
//! * [`pearson`]: linear correlation.
//! * [`hgr_nn`]: neural maximal-correlation estimator. Two networks `f`, `g`
//!   are trained by gradient ascent on the mean product of their
//!   batch-standardized outputs, i.e. their batch correlation.
//! * [`hgr_kde`]: second singular value of the normalized joint-mass matrix
//!   `p(i,j) / √(p_u(i) p_v(j))` of a Gaussian KDE on a grid.
//! * [`hgr_rdc`]: top canonical correlation of sine random features of the
//!   empirical copula.
//! * [`mine_mi`]: Donsker–Varadhan lower bound on mutual information with a
//!   trained statistics network.
//! * [`fairquant`]: mean absolute gap between per-quantile mean predictions
//!   and the overall mean prediction.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::linalg::{
    cca_top_detailed, copula_ranks, kde_density_grid, quantile_partition, silverman_bandwidth, svd,
};
use crate::nn::{Adam, Architecture, Direction, Mlp};
use crate::rng::SeededRng;

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_KDE_BINS: usize = 32;
pub const DEFAULT_RDC_K: usize = 20;
pub const DEFAULT_RDC_S: f64 = 1.0 / 6.0;
pub const RDC_RIDGE: f64 = 1e-8;

// Seed streams derived from one estimator seed.
const STREAM_F: u64 = 1;
const STREAM_G: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_MARGINALS: u64 = 4;

pub fn default_adversary_arch() -> Architecture {
    "FC:64 R, FC:64 R, FC:1".parse().expect("valid architecture")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HgrNnConfig {
    pub f_arch: Architecture,
    pub g_arch: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_f: f64,
    pub lr_g: f64,
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for HgrNnConfig {
    fn default() -> Self {
        Self {
            f_arch: default_adversary_arch(),
            g_arch: default_adversary_arch(),
            epochs: 40,
            batch_size: 512,
            lr_f: 1e-3,
            lr_g: 1e-3,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl HgrNnConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 2".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("epsilon must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Nn,
    Kde,
    Rdc,
    MineMi,
    PearsonAbs,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Nn => "nn",
            Estimator::Kde => "kde",
            Estimator::Rdc => "rdc",
            Estimator::MineMi => "mine_mi",
            Estimator::PearsonAbs => "pearson_abs",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "nn" | "hgr_nn" => Estimator::Nn,
            "kde" | "hgr_kde" => Estimator::Kde,
            "rdc" | "hgr_rdc" => Estimator::Rdc,
            "mine" | "mine_mi" => Estimator::MineMi,
            "pearson" | "pearson_abs" => Estimator::PearsonAbs,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown estimator {other:?} (expected nn, kde, rdc, mine, pearson)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFlag {
    /// A learned transform was constant on the full sample.
    DegenerateTransform,
    /// Empty marginal KDE bins were merged into neighbours.
    MergedBins,
    /// A random-feature covariance block was rank-deficient; ridge applied.
    RidgeRegularized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HgrReport {
    /// In [0, 1] for HGR-type estimators; nats ≥ 0 for MINE.
    pub estimate: f64,
    pub estimator: Estimator,
    pub n: usize,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<ReportFlag>,
}

impl HgrReport {
    pub fn has_flag(&self, flag: ReportFlag) -> bool {
        self.flags.contains(&flag)
    }
}

pub fn pearson(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument(format!(
            "pearson needs equal lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    if u.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs ≥ 2 samples".into()));
    }
    let n = u.len() as f64;
    let (mu, mv) = (u.sum() / n, v.sum() / n);
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v.iter()) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 || svv == 0.0 {
        return Err(Error::Degenerate("degenerate column".into()));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0))
}

/// The HGR objective on a tape: mean of the products of the column-standardized
/// outputs `a` and `b` (both batch × 1).
pub fn standardized_product_mean(tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<Var> {
    let sa = tape.standardize(a, eps)?;
    let sb = tape.standardize(b, eps)?;
    let prod = tape.mul(sa, sb)?;
    Ok(tape.mean(prod))
}

/// Tape-free counterpart of [`standardized_product_mean`]. `None` when either
/// column is constant.
pub fn standardized_product_mean_values(a: ArrayView1<f64>, b: ArrayView1<f64>, eps: f64) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
    let scale_a = ma.abs().max(1.0);
    let scale_b = mb.abs().max(1.0);
    if va.sqrt() <= 1e-12 * scale_a || vb.sqrt() <= 1e-12 * scale_b {
        return None;
    }
    let cov = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    Some(cov / ((va + eps).sqrt() * (vb + eps).sqrt()))
}

/// Column-wise z-scoring with population statistics. Constant columns are
/// only centered.
fn zscore(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let sd = x.var_axis(Axis(0), 0.0).mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    (&x - &mean) / &sd
}

fn check_pair(u: ArrayView2<f64>, v: ArrayView2<f64>, batch_size: usize) -> Result<()> {
    if u.nrows() != v.nrows() {
        return Err(Error::InvalidArgument(format!(
            "u has {} rows, v has {}",
            u.nrows(),
            v.nrows()
        )));
    }
    if u.nrows() < batch_size {
        return Err(Error::InvalidArgument(format!(
            "need at least batch_size = {batch_size} rows, got {}",
            u.nrows()
        )));
    }
    if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("estimator input".into()));
    }
    Ok(())
}

fn check_scalar_head(arch: &Architecture, name: &str) -> Result<()> {
    if arch.output_dim() != 1 {
        return Err(Error::InvalidArgument(format!(
            "{name} must end in a width-1 layer, got {arch}"
        )));
    }
    Ok(())
}

/// Trained transform pair and the raw full-sample objective.
pub struct HgrFit {
    pub f: Mlp,
    /// `None` when `v` entered through the fixed identity transform.
    pub g: Option<Mlp>,
    pub f_outputs: Array1<f64>,
    pub g_outputs: Array1<f64>,
    /// Full-sample standardized-product mean before clamping; `None` when a
    /// transform collapsed to a constant.
    pub raw: Option<f64>,
}

fn fit_hgr(u: ArrayView2<f64>, v: ArrayView2<f64>, cfg: &HgrNnConfig, learn_g: bool) -> Result<HgrFit> {
    cfg.validate()?;
    check_pair(u, v, cfg.batch_size)?;
    check_scalar_head(&cfg.f_arch, "f_arch")?;
    if learn_g {
        check_scalar_head(&cfg.g_arch, "g_arch")?;
    } else if v.ncols() != 1 {
        return Err(Error::InvalidArgument("fixed identity g needs a single v column".into()));
    }
    let (u, v) = (zscore(u), zscore(v));
    let n = u.nrows();

    let mut f = Mlp::new(&cfg.f_arch, u.ncols(), SeededRng::derive(cfg.seed, STREAM_F).next_seed())?;
    let mut g = if learn_g {
        Some(Mlp::new(&cfg.g_arch, v.ncols(), SeededRng::derive(cfg.seed, STREAM_G).next_seed())?)
    } else {
        None
    };
    let mut opt_f = Adam::new(&f, cfg.lr_f);
    let mut opt_g = g.as_ref().map(|g| Adam::new(g, cfg.lr_g));
    let mut batches = SeededRng::derive(cfg.seed, STREAM_BATCHES);

    for epoch in 0..cfg.epochs {
        let perm = batches.permutation(n);
        for (b, rows) in perm.chunks_exact(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let ub = tape.input(u.select(Axis(0), rows));
            let vb = tape.input(v.select(Axis(0), rows));
            let (fu, bf) = f.forward(&mut tape, ub)?;
            let (gv, bg) = match &g {
                Some(g) => {
                    let (out, bound) = g.forward(&mut tape, vb)?;
                    (out, Some(bound))
                }
                None => (vb, None),
            };
            let j = standardized_product_mean(&mut tape, fu, gv, cfg.epsilon)?;
            if !tape.scalar(j).is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: "non-finite HGR objective".into(),
                });
            }
            let grads = tape.backward(j)?;
            opt_f.step(&mut f, &bf.grads(&grads), Direction::Ascent)?;
            if let (Some(g), Some(opt), Some(bound)) = (g.as_mut(), opt_g.as_mut(), bg) {
                opt.step(g, &bound.grads(&grads), Direction::Ascent)?;
            }
        }
    }

    let f_outputs = f.predict(&u)?.column(0).to_owned();
    let g_outputs = match &g {
        Some(g) => g.predict(&v)?.column(0).to_owned(),
        None => v.column(0).to_owned(),
    };
    let raw = standardized_product_mean_values(f_outputs.view(), g_outputs.view(), cfg.epsilon);
    Ok(HgrFit {
        f,
        g,
        f_outputs,
        g_outputs,
        raw,
    })
}

fn nn_report(fit: &HgrFit, n: usize, estimator: Estimator, cfg: &HgrNnConfig) -> HgrReport {
    let (estimate, flags) = match fit.raw {
        Some(r) => (r.clamp(0.0, 1.0), vec![]),
        None => (0.0, vec![ReportFlag::DegenerateTransform]),
    };
    HgrReport {
        estimate,
        estimator,
        n,
        config_fingerprint: fingerprint(cfg),
        flags,
    }
}

/// Neural HGR estimate between `u` and `v` (either may be multi-column).
pub fn hgr_nn(u: ArrayView2<f64>, v: ArrayView2<f64>, cfg: &HgrNnConfig) -> Result<HgrReport> {
    let fit = fit_hgr(u, v, cfg, true)?;
    Ok(nn_report(&fit, u.nrows(), Estimator::Nn, cfg))
}

/// Like [`hgr_nn`] but also returns the trained networks and their outputs.
pub fn hgr_nn_fit(u: ArrayView2<f64>, v: ArrayView2<f64>, cfg: &HgrNnConfig) -> Result<HgrFit> {
    fit_hgr(u, v, cfg, true)
}

/// Estimator with `g` fixed to the identity on `v`: approximates
/// `ρ(E(V|U), V)`. Returns the estimate and the trained `f(U)`.
pub fn hgr_nn_simplified(
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
    cfg: &HgrNnConfig,
) -> Result<(f64, Array1<f64>)> {
    let u2 = u.insert_axis(Axis(1));
    let v2 = v.insert_axis(Axis(1));
    let fit = fit_hgr(u2, v2, cfg, false)?;
    Ok((fit.raw.map_or(0.0, |r| r.clamp(0.0, 1.0)), fit.f_outputs))
}

/// Singular values of the normalized joint-mass matrix of a KDE grid, and
/// whether empty marginal bins had to be merged.
pub fn witsenhausen_spectrum(u: ArrayView1<f64>, v: ArrayView1<f64>, bins: usize) -> Result<(Array1<f64>, bool)> {
    let q = witsenhausen_matrix(u, v, bins)?;
    Ok((svd(q.0.view())?.values, q.1))
}

fn witsenhausen_matrix(u: ArrayView1<f64>, v: ArrayView1<f64>, bins: usize) -> Result<(Array2<f64>, bool)> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument("u and v lengths differ".into()));
    }
    if u.len() < 50 {
        return Err(Error::InvalidArgument(format!("hgr_kde needs n ≥ 50, got {}", u.len())));
    }
    if bins < 4 {
        return Err(Error::InvalidArgument(format!("hgr_kde needs bins ≥ 4, got {bins}")));
    }
    let (bu, bv) = (silverman_bandwidth(u), silverman_bandwidth(v));
    if !(bu > 0.0 && bv > 0.0) {
        return Err(Error::Degenerate("degenerate column".into()));
    }
    let grid = kde_density_grid(u, v, bins, bu, bv)?;
    let mass = grid.cell_masses();
    let (pu, pv) = marginals(&mass);
    let (groups_u, merged_u) = merge_groups(&pu);
    let (groups_v, merged_v) = merge_groups(&pv);
    let mass = if merged_u || merged_v {
        let mut m = Array2::<f64>::zeros((groups_u.len(), groups_v.len()));
        for (gi, rows) in groups_u.iter().enumerate() {
            for (gj, cols) in groups_v.iter().enumerate() {
                m[[gi, gj]] = rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|ij| mass[ij]).sum();
            }
        }
        m
    } else {
        mass
    };
    let (pu, pv) = marginals(&mass);
    let q = Array2::from_shape_fn(mass.dim(), |(i, j)| mass[[i, j]] / (pu[i] * pv[j]).sqrt());
    Ok((q, merged_u || merged_v))
}

/// Row and column sums, both accumulated sequentially so that the marginals
/// of the transpose are bit-identical to the swapped marginals.
fn marginals(mass: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mut pu = Array1::<f64>::zeros(mass.nrows());
    let mut pv = Array1::<f64>::zeros(mass.ncols());
    for ((i, j), &m) in mass.indexed_iter() {
        pu[i] += m;
        pv[j] += m;
    }
    (pu, pv)
}

/// Groups bins so every group has marginal mass above a floor; an empty bin
/// joins its right neighbour (the last ones join the left).
fn merge_groups(marginal: &Array1<f64>) -> (Vec<Vec<usize>>, bool) {
    let max = marginal.iter().copied().fold(0.0, f64::max);
    let floor = 1e-12 * max;
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    let mut merged = false;
    for (i, &m) in marginal.iter().enumerate() {
        pending.push(i);
        if m > floor {
            groups.push(std::mem::take(&mut pending));
        } else {
            merged = true;
        }
    }
    if !pending.is_empty() {
        match groups.last_mut() {
            Some(last) => last.extend(pending),
            None => groups.push(pending),
        }
    }
    (groups, merged)
}

/// KDE-based HGR estimate between two columns.
pub fn hgr_kde(u: ArrayView1<f64>, v: ArrayView1<f64>, bins: usize) -> Result<HgrReport> {
    let (q, merged) = witsenhausen_matrix(u, v, bins)?;
    // Both orientations, so the estimate is exactly symmetric in (u, v).
    let second = |m: ArrayView2<f64>| -> Result<f64> {
        let s = svd(m)?.values;
        Ok(s.get(1).copied().unwrap_or(0.0))
    };
    let estimate = 0.5 * (second(q.view())? + second(q.t())?);
    Ok(HgrReport {
        estimate: estimate.clamp(0.0, 1.0),
        estimator: Estimator::Kde,
        n: u.len(),
        config_fingerprint: fingerprint(&("kde", bins)),
        flags: if merged { vec![ReportFlag::MergedBins] } else { vec![] },
    })
}

fn rdc_features(x: ArrayView2<f64>, k: usize, s: f64, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let mut augmented = Array2::<f64>::ones((n, d + 1));
    for j in 0..d {
        augmented.column_mut(j).assign(&copula_ranks(x.column(j)));
    }
    let mut rng = SeededRng::new(seed);
    let w = Array2::from_shape_simple_fn((d + 1, k), || rng.normal_with(0.0, s));
    augmented.dot(&w).mapv(f64::sin)
}

/// RDC with explicit per-side projection seeds; `hgr_rdc_seeded(u, v, a, b)`
/// equals `hgr_rdc_seeded(v, u, b, a)`.
pub fn hgr_rdc_seeded(
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
    k: usize,
    s: f64,
    seed_u: u64,
    seed_v: u64,
) -> Result<HgrReport> {
    if u.nrows() != v.nrows() {
        return Err(Error::InvalidArgument("u and v row counts differ".into()));
    }
    if k == 0 || u.nrows() <= 2 * k {
        return Err(Error::InvalidArgument(format!(
            "hgr_rdc needs n > 2k (n = {}, k = {k})",
            u.nrows()
        )));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument("rdc scale s must be > 0".into()));
    }
    let fu = rdc_features(u, k, s, seed_u);
    let fv = rdc_features(v, k, s, seed_v);
    let cca = cca_top_detailed(fu.view(), fv.view(), RDC_RIDGE)?;
    Ok(HgrReport {
        estimate: cca.correlation,
        estimator: Estimator::Rdc,
        n: u.nrows(),
        config_fingerprint: fingerprint(&("rdc", k, s.to_bits(), seed_u, seed_v)),
        flags: if cca.rank_deficient {
            vec![ReportFlag::RidgeRegularized]
        } else {
            vec![]
        },
    })
}

pub fn hgr_rdc(u: ArrayView2<f64>, v: ArrayView2<f64>, k: usize, s: f64, seed: u64) -> Result<HgrReport> {
    let su = SeededRng::derive(seed, STREAM_F).next_seed();
    let sv = SeededRng::derive(seed, STREAM_G).next_seed();
    hgr_rdc_seeded(u, v, k, s, su, sv)
}

fn log_mean_exp(x: ArrayView1<f64>) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + (x.iter().map(|&e| (e - max).exp()).sum::<f64>() / x.len() as f64).ln()
}

const MINE_EVAL_SHUFFLES: usize = 5;

/// Mutual information (nats) via the Donsker–Varadhan bound
/// `E_joint[T] − ln E_marginal[e^T]`, with `T = cfg.f_arch` on `[u, v]`.
pub fn mine_mi(u: ArrayView2<f64>, v: ArrayView2<f64>, cfg: &HgrNnConfig) -> Result<HgrReport> {
    cfg.validate()?;
    check_pair(u, v, cfg.batch_size)?;
    check_scalar_head(&cfg.f_arch, "f_arch")?;
    let (u, v) = (zscore(u), zscore(v));
    let n = u.nrows();
    let mut t_net = Mlp::new(
        &cfg.f_arch,
        u.ncols() + v.ncols(),
        SeededRng::derive(cfg.seed, STREAM_F).next_seed(),
    )?;
    let mut opt = Adam::new(&t_net, cfg.lr_f);
    let mut batches = SeededRng::derive(cfg.seed, STREAM_BATCHES);
    let mut marginals = SeededRng::derive(cfg.seed, STREAM_MARGINALS);

    for epoch in 0..cfg.epochs {
        let perm = batches.permutation(n);
        for (b, rows) in perm.chunks_exact(cfg.batch_size).enumerate() {
            let shuffled: Vec<usize> = {
                let inner = marginals.permutation(rows.len());
                inner.iter().map(|&i| rows[i]).collect()
            };
            let mut tape = Tape::new();
            let ub = tape.input(u.select(Axis(0), rows));
            let vb = tape.input(v.select(Axis(0), rows));
            let vm = tape.input(v.select(Axis(0), &shuffled));
            let joint = tape.concat_cols(ub, vb)?;
            let marg = tape.concat_cols(ub, vm)?;
            let bound = t_net.bind(&mut tape);
            let tj = bound.forward(&mut tape, joint)?;
            let tm = bound.forward(&mut tape, marg)?;
            let mj = tape.mean(tj);
            let lme = tape.log_mean_exp(tm);
            let dv = tape.sub(mj, lme)?;
            if !tape.scalar(dv).is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: "non-finite Donsker-Varadhan objective".into(),
                });
            }
            let grads = tape.backward(dv)?;
            opt.step(&mut t_net, &bound.grads(&grads), Direction::Ascent)?;
        }
    }

    let joint = ndarray::concatenate(Axis(1), &[u.view(), v.view()]).expect("rows agree");
    let tj = t_net.predict(&joint)?;
    let mean_joint = tj.sum() / n as f64;
    let mut lme_sum = 0.0;
    for _ in 0..MINE_EVAL_SHUFFLES {
        let perm = marginals.permutation(n);
        let marg = ndarray::concatenate(Axis(1), &[u.view(), v.select(Axis(0), &perm).view()])
            .expect("rows agree");
        lme_sum += log_mean_exp(t_net.predict(&marg)?.column(0));
    }
    let mi = mean_joint - lme_sum / MINE_EVAL_SHUFFLES as f64;
    if !mi.is_finite() {
        return Err(Error::NonFinite("mine estimate".into()));
    }
    Ok(HgrReport {
        estimate: mi.max(0.0),
        estimator: Estimator::MineMi,
        n,
        config_fingerprint: fingerprint(&("mine", cfg)),
        flags: vec![],
    })
}

/// `(1/Q) Σ_q |mean(ŷ in q) − mean(ŷ)|` over `quantiles` equal-count buckets
/// of `s`.
pub fn fairquant(y_hat: ArrayView1<f64>, s: ArrayView1<f64>, quantiles: usize) -> Result<f64> {
    if y_hat.len() != s.len() {
        return Err(Error::InvalidArgument("y_hat and s lengths differ".into()));
    }
    let buckets = quantile_partition(s, quantiles)?;
    let overall = y_hat.sum() / y_hat.len() as f64;
    let total: f64 = buckets
        .iter()
        .map(|b| {
            let m = b.iter().map(|&i| y_hat[i]).sum::<f64>() / b.len() as f64;
            (m - overall).abs()
        })
        .sum();
    Ok(total / quantiles as f64)
}

/// Runs `estimate` on `(u, v[π])` for `shuffles` random row permutations π.
pub fn permutation_null<F>(
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
    shuffles: usize,
    seed: u64,
    mut estimate: F,
) -> Result<Vec<f64>>
where
    F: FnMut(ArrayView2<f64>, ArrayView2<f64>) -> Result<f64>,
{
    let mut rng = SeededRng::new(seed);
    (0..shuffles)
        .map(|_| {
            let perm = rng.permutation(v.nrows());
            let shuffled = v.select(Axis(0), &perm);
            estimate(u, shuffled.view())
        })
        .collect()
}
