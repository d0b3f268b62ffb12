//! Adversarial fair learning with an HGR penalty.
//!
//! The model is an encoder `h` producing a latent code `Z`, a predictor `φ`
//! reading `Z`, and an adversary pair `(f, g)` estimating the maximal
//! correlation between `f(Z)` (or `f(Ŷ)`) and `g(S)`. Each batch runs:
//!
//! 1. descent on `φ` for the task loss `L_Y`;
//! 2. batch standardization of `f` and `g` outputs;
//! 3. `J = mean(f̂ ĝ)`;
//! 4. `L_E = L_Y + λ J`;
//! 5. ascent on `f`, `g` for `J`;
//! 6. descent on the encoder for `L_E`.
//!
//! Gradients flow through the batch mean and variance used in step 2.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    self, standardized_product_mean, HgrNnConfig, DEFAULT_EPSILON, DEFAULT_KDE_BINS, DEFAULT_RDC_K,
    DEFAULT_RDC_S,
};
use crate::nn::{Adam, Architecture, Direction, Mlp, ParamGrads};
use crate::rng::SeededRng;

const STREAM_ENCODER: u64 = 11;
const STREAM_PREDICTOR: u64 = 12;
const STREAM_BATCHES: u64 = 13;
const STREAM_ADV_F: u64 = 21;
const STREAM_ADV_G: u64 = 22;
const STREAM_ADV_SHUFFLE: u64 = 23;
const STREAM_EVAL: u64 = 31;

pub const DEFAULT_FAIRQUANT_QUANTILES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    BinaryCrossEntropy,
    CategoricalCrossEntropy,
}

impl LossKind {
    pub fn is_classification(self) -> bool {
        !matches!(self, LossKind::Mse)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Adversary reads the latent code `Z`.
    HgrRepresentation,
    /// Adversary reads the prediction `Ŷ`.
    HgrPrediction,
    /// Least-squares network predicting `S` from `Ŷ`; penalty `−λ·MSE`.
    SimpleAdversary,
    /// Donsker–Varadhan statistics network on `(Z, S)`; penalty `λ·MI`.
    MineRepresentation,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::HgrRepresentation => "hgr_representation",
            TrainMode::HgrPrediction => "hgr_prediction",
            TrainMode::SimpleAdversary => "simple_adversary",
            TrainMode::MineRepresentation => "mine_representation",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hgr_representation" => TrainMode::HgrRepresentation,
            "hgr_prediction" => TrainMode::HgrPrediction,
            "simple_adversary" => TrainMode::SimpleAdversary,
            "mine_representation" => TrainMode::MineRepresentation,
            other => return Err(Error::InvalidArgument(format!("unknown training mode {other:?}"))),
        })
    }
}

fn arch(s: &str) -> Architecture {
    s.parse().expect("valid architecture")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FairTrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub lr_f: f64,
    pub lr_g: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub seed: u64,
    /// Seed for adversary initialization and shuffles; the run seed if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversary_seed: Option<u64>,
    pub mode: TrainMode,
    pub encoder_arch: Architecture,
    pub predictor_arch: Architecture,
    pub adversary_f_arch: Architecture,
    pub adversary_g_arch: Architecture,
    pub epsilon: f64,
}

impl Default for FairTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 13.0,
            epochs: 200,
            batch_size: 2048,
            loss: LossKind::BinaryCrossEntropy,
            lr_f: 1e-3,
            lr_g: 1e-3,
            lr_phi: 1e-3,
            lr_psi: 1e-3,
            seed: 0,
            adversary_seed: None,
            mode: TrainMode::HgrRepresentation,
            encoder_arch: arch("FC:16 R, FC:8 R, FC:2"),
            predictor_arch: arch("FC:16 R, FC:8 R, FC:4 R, FC:1 Sig"),
            adversary_f_arch: metrics::default_adversary_arch(),
            adversary_g_arch: metrics::default_adversary_arch(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl FairTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 2".into()));
        }
        for (name, lr) in [
            ("lr_f", self.lr_f),
            ("lr_g", self.lr_g),
            ("lr_phi", self.lr_phi),
            ("lr_psi", self.lr_psi),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("epsilon must be ≥ 0".into()));
        }
        Ok(())
    }

    fn adversary_seed(&self) -> u64 {
        self.adversary_seed.unwrap_or(self.seed)
    }
}

/// Encoder, predictor and adversary networks.
///
/// In [`TrainMode::SimpleAdversary`] `adv_f` maps `Ŷ` to a prediction of `S`
/// and `adv_g` is absent. In [`TrainMode::MineRepresentation`] `adv_f` is the
/// statistics network on `[Z, S]` and `adv_g` is absent.
#[derive(Clone, Debug)]
pub struct FairModel {
    pub encoder: Mlp,
    pub predictor: Mlp,
    pub adv_f: Option<Mlp>,
    pub adv_g: Option<Mlp>,
}

impl FairModel {
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.predict(x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predictor.predict(&self.encoder.predict(x)?)
    }
}

/// One line of the per-epoch training log; values are means over batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub predictor_loss: f64,
    /// Accuracy for classification, MSE for regression.
    pub task_metric: f64,
    /// `J` for HGR modes, adversary MSE for the simple adversary, the DV
    /// bound for MINE, 0 without an adversary.
    pub adversary_objective: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    HgrNnZ,
    HgrNnYhat,
    HgrKdeYhat,
    HgrRdcYhat,
    MineYhat,
    Fairquant,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::HgrNnZ,
        Metric::HgrNnYhat,
        Metric::HgrKdeYhat,
        Metric::HgrRdcYhat,
        Metric::MineYhat,
        Metric::Fairquant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::HgrNnZ => "hgr_nn_z",
            Metric::HgrNnYhat => "hgr_nn_yhat",
            Metric::HgrKdeYhat => "hgr_kde_yhat",
            Metric::HgrRdcYhat => "hgr_rdc_yhat",
            Metric::MineYhat => "mine_yhat",
            Metric::Fairquant => "fairquant",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

/// Which final metrics to compute on the test rows, and with what settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub hgr: HgrNnConfig,
    pub mine: HgrNnConfig,
    pub kde_bins: usize,
    pub rdc_k: usize,
    pub rdc_s: f64,
    pub fairquant_quantiles: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            hgr: HgrNnConfig::default(),
            mine: HgrNnConfig {
                f_arch: arch("FC:64 R, FC:64 R, FC:1"),
                lr_f: 1e-3,
                ..HgrNnConfig::default()
            },
            kde_bins: DEFAULT_KDE_BINS,
            rdc_k: DEFAULT_RDC_K,
            rdc_s: DEFAULT_RDC_S,
            fairquant_quantiles: DEFAULT_FAIRQUANT_QUANTILES,
        }
    }
}

/// Held-out metrics. `None` marks a metric that was not requested or does
/// not apply (e.g. KDE on a multi-column prediction).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub hgr_nn_z: Option<f64>,
    pub hgr_nn_yhat: Option<f64>,
    pub hgr_kde_yhat: Option<f64>,
    pub hgr_rdc_yhat: Option<f64>,
    pub mine_yhat: Option<f64>,
    pub fairquant: Option<f64>,
}

impl FinalMetrics {
    pub const KEYS: [&'static str; 8] = [
        "accuracy",
        "mse",
        "hgr_nn_z",
        "hgr_nn_yhat",
        "hgr_kde_yhat",
        "hgr_rdc_yhat",
        "mine_yhat",
        "fairquant",
    ];

    /// Values in [`Self::KEYS`] order.
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.accuracy,
            self.mse,
            self.hgr_nn_z,
            self.hgr_nn_yhat,
            self.hgr_kde_yhat,
            self.hgr_rdc_yhat,
            self.mine_yhat,
            self.fairquant,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FairRunResult {
    pub epochs: Vec<EpochRow>,
    pub final_metrics: Option<FinalMetrics>,
}

/// Steps of one training batch, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateStep {
    PredictorDescent,
    Standardize,
    Objective,
    AdversaryAscent,
    /// The simple adversary minimizes its own MSE.
    AdversaryDescent,
    EncoderDescent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEvent {
    pub epoch: usize,
    pub batch: usize,
    pub step: UpdateStep,
    /// Objective value for [`UpdateStep::Objective`], NaN otherwise.
    pub value: f64,
}

/// Plain training: encoder and predictor only, same batches and
/// initialization as the adversarial variants.
pub fn train(train: &Dataset, cfg: &FairTrainConfig) -> Result<(FairModel, FairRunResult)> {
    run(train, cfg, None, &mut |_| {})
}

/// Fair representation: the adversary reads `Z`.
pub fn train_fair(train: &Dataset, cfg: &FairTrainConfig) -> Result<(FairModel, FairRunResult)> {
    run(train, cfg, Some(TrainMode::HgrRepresentation), &mut |_| {})
}

/// Prediction retreatment: the adversary reads `Ŷ`.
pub fn train_fair_prediction(train: &Dataset, cfg: &FairTrainConfig) -> Result<(FairModel, FairRunResult)> {
    run(train, cfg, Some(TrainMode::HgrPrediction), &mut |_| {})
}

pub fn train_simple_adversary(train: &Dataset, cfg: &FairTrainConfig) -> Result<(FairModel, FairRunResult)> {
    run(train, cfg, Some(TrainMode::SimpleAdversary), &mut |_| {})
}

/// Trains in `cfg.mode`.
pub fn train_mode(train: &Dataset, cfg: &FairTrainConfig) -> Result<(FairModel, FairRunResult)> {
    run(train, cfg, Some(cfg.mode), &mut |_| {})
}

/// Like [`train_mode`], reporting every update step to `observer`.
pub fn train_traced(
    train: &Dataset,
    cfg: &FairTrainConfig,
    observer: &mut dyn FnMut(TraceEvent),
) -> Result<(FairModel, FairRunResult)> {
    run(train, cfg, Some(cfg.mode), observer)
}

fn check_inputs(data: &Dataset, cfg: &FairTrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "need at least batch_size = {} training rows, got {}",
            cfg.batch_size,
            data.len()
        )));
    }
    if [&data.x, &data.s, &data.y].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("training data".into()));
    }
    let out = cfg.predictor_arch.output_dim();
    match cfg.loss {
        LossKind::Mse if out != data.y.ncols() => Err(Error::InvalidArgument(format!(
            "predictor width {out} does not match {} target columns",
            data.y.ncols()
        ))),
        LossKind::BinaryCrossEntropy if out != 1 => Err(Error::InvalidArgument(
            "binary cross-entropy needs a width-1 predictor head".into(),
        )),
        LossKind::CategoricalCrossEntropy if data.y.ncols() != 1 => Err(Error::InvalidArgument(
            "categorical cross-entropy needs a single class-index column".into(),
        )),
        _ => Ok(()),
    }
}

fn task_loss(tape: &mut Tape, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    match kind {
        LossKind::Mse => tape.mse(pred, target),
        LossKind::BinaryCrossEntropy => tape.bce(pred, target),
        LossKind::CategoricalCrossEntropy => tape.cross_entropy(pred, target),
    }
}

/// Accuracy (classification) or MSE (regression) of `pred` against `y`.
pub fn task_metric(kind: LossKind, pred: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let n = pred.nrows() as f64;
    match kind {
        LossKind::Mse => (&pred - &y).mapv(|d| d * d).sum() / (n * y.ncols() as f64),
        LossKind::BinaryCrossEntropy => {
            let hits = pred
                .column(0)
                .iter()
                .zip(y.column(0))
                .filter(|(&p, &t)| (p >= 0.5) == (t >= 0.5))
                .count();
            hits as f64 / n
        }
        LossKind::CategoricalCrossEntropy => {
            let hits = pred
                .rows()
                .into_iter()
                .zip(y.column(0))
                .filter(|(row, &t)| argmax(row.iter().copied()) == t.round() as usize)
                .count();
            hits as f64 / n
        }
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn diverged(epoch: usize, batch: usize, what: &str) -> Error {
    Error::Diverged {
        epoch,
        batch,
        detail: format!("non-finite {what}"),
    }
}

fn step_checked(
    opt: &mut Adam,
    mlp: &mut Mlp,
    grads: ParamGrads,
    dir: Direction,
    (epoch, batch, what): (usize, usize, &str),
) -> Result<()> {
    if !grads.is_finite() {
        return Err(diverged(epoch, batch, what));
    }
    opt.step(mlp, &grads, dir)
}

struct Adversary {
    f: Mlp,
    g: Option<Mlp>,
    opt_f: Adam,
    opt_g: Option<Adam>,
    shuffles: SeededRng,
}

fn build_adversary(mode: TrainMode, data: &Dataset, cfg: &FairTrainConfig) -> Result<Adversary> {
    let seed = cfg.adversary_seed();
    let f_seed = SeededRng::derive(seed, STREAM_ADV_F).next_seed();
    let g_seed = SeededRng::derive(seed, STREAM_ADV_G).next_seed();
    let z_dim = cfg.encoder_arch.output_dim();
    let yhat_dim = cfg.predictor_arch.output_dim();
    let s_dim = data.s.ncols();
    let scalar = |a: &Architecture, name: &str| {
        if a.output_dim() == 1 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{name} must end in a width-1 layer, got {a}")))
        }
    };
    let (f, g) = match mode {
        TrainMode::HgrRepresentation | TrainMode::HgrPrediction => {
            scalar(&cfg.adversary_f_arch, "adversary_f_arch")?;
            scalar(&cfg.adversary_g_arch, "adversary_g_arch")?;
            let f_in = if mode == TrainMode::HgrRepresentation { z_dim } else { yhat_dim };
            (
                Mlp::new(&cfg.adversary_f_arch, f_in, f_seed)?,
                Some(Mlp::new(&cfg.adversary_g_arch, s_dim, g_seed)?),
            )
        }
        TrainMode::SimpleAdversary => {
            if cfg.adversary_f_arch.output_dim() != s_dim {
                return Err(Error::InvalidArgument(format!(
                    "simple adversary output width {} does not match {s_dim} sensitive columns",
                    cfg.adversary_f_arch.output_dim()
                )));
            }
            (Mlp::new(&cfg.adversary_f_arch, yhat_dim, f_seed)?, None)
        }
        TrainMode::MineRepresentation => {
            scalar(&cfg.adversary_f_arch, "adversary_f_arch")?;
            (Mlp::new(&cfg.adversary_f_arch, z_dim + s_dim, f_seed)?, None)
        }
    };
    let opt_f = Adam::new(&f, cfg.lr_f);
    let opt_g = g.as_ref().map(|g| Adam::new(g, cfg.lr_g));
    Ok(Adversary {
        f,
        g,
        opt_f,
        opt_g,
        shuffles: SeededRng::derive(seed, STREAM_ADV_SHUFFLE),
    })
}

#[derive(Default)]
struct EpochAccumulator {
    loss: f64,
    metric: f64,
    objective: f64,
    batches: usize,
}

fn run(
    data: &Dataset,
    cfg: &FairTrainConfig,
    mode: Option<TrainMode>,
    observer: &mut dyn FnMut(TraceEvent),
) -> Result<(FairModel, FairRunResult)> {
    check_inputs(data, cfg)?;
    let mut encoder = Mlp::new(
        &cfg.encoder_arch,
        data.x.ncols(),
        SeededRng::derive(cfg.seed, STREAM_ENCODER).next_seed(),
    )?;
    let mut predictor = Mlp::new(
        &cfg.predictor_arch,
        encoder.output_dim(),
        SeededRng::derive(cfg.seed, STREAM_PREDICTOR).next_seed(),
    )?;
    let mut opt_psi = Adam::new(&encoder, cfg.lr_psi);
    let mut opt_phi = Adam::new(&predictor, cfg.lr_phi);
    let mut adversary = mode.map(|m| build_adversary(m, data, cfg)).transpose()?;
    let mut batches = SeededRng::derive(cfg.seed, STREAM_BATCHES);
    let mut rows_out = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let perm = batches.permutation(data.len());
        let mut acc = EpochAccumulator::default();
        for (b, rows) in perm.chunks_exact(cfg.batch_size).enumerate() {
            let x = data.x.select(Axis(0), rows);
            let s = data.s.select(Axis(0), rows);
            let y = data.y.select(Axis(0), rows);
            let at = |what| (epoch, b, what);
            let emit = |observer: &mut dyn FnMut(TraceEvent), step, value| {
                observer(TraceEvent {
                    epoch,
                    batch: b,
                    step,
                    value,
                })
            };

            // Predictor descent on the task loss.
            {
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                let yv = tape.input(y.clone());
                let (z, _) = encoder.forward(&mut tape, xv)?;
                let (pred, bound) = predictor.forward(&mut tape, z)?;
                let loss = task_loss(&mut tape, cfg.loss, pred, yv)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(diverged(epoch, b, "predictor loss"));
                }
                acc.loss += value;
                acc.metric += task_metric(cfg.loss, tape.value(pred).view(), y.view());
                let grads = tape.backward(loss)?;
                step_checked(&mut opt_phi, &mut predictor, bound.grads(&grads), Direction::Descent, at("predictor gradient"))?;
                emit(observer, UpdateStep::PredictorDescent, f64::NAN);
            }

            // Second forward pass with the updated predictor.
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let yv = tape.input(y);
            let sv = tape.input(s);
            let (z, enc_bound) = encoder.forward(&mut tape, xv)?;
            let (pred, _) = predictor.forward(&mut tape, z)?;
            let loss_y = task_loss(&mut tape, cfg.loss, pred, yv)?;

            let Some(adv) = adversary.as_mut() else {
                let grads = tape.backward(loss_y)?;
                step_checked(&mut opt_psi, &mut encoder, enc_bound.grads(&grads), Direction::Descent, at("encoder gradient"))?;
                emit(observer, UpdateStep::EncoderDescent, f64::NAN);
                acc.batches += 1;
                continue;
            };
            let mode = mode.expect("adversary implies a mode");

            let penalty_factor = if mode == TrainMode::SimpleAdversary { -cfg.lambda } else { cfg.lambda };
            let (objective, penalty, adv_dir, f_bound, g_bound) = match mode {
                TrainMode::HgrRepresentation | TrainMode::HgrPrediction => {
                    let input = if mode == TrainMode::HgrRepresentation { z } else { pred };
                    let (fo, fb) = adv.f.forward(&mut tape, input)?;
                    let g = adv.g.as_ref().expect("hgr adversary has g");
                    let (go, gb) = g.forward(&mut tape, sv)?;
                    emit(observer, UpdateStep::Standardize, f64::NAN);
                    let j = standardized_product_mean(&mut tape, fo, go, cfg.epsilon)?;
                    (j, tape.scale(j, penalty_factor), Direction::Ascent, fb, Some(gb))
                }
                TrainMode::SimpleAdversary => {
                    let (s_hat, fb) = adv.f.forward(&mut tape, pred)?;
                    let mse = tape.mse(s_hat, sv)?;
                    (mse, tape.scale(mse, penalty_factor), Direction::Descent, fb, None)
                }
                TrainMode::MineRepresentation => {
                    let inner = adv.shuffles.permutation(rows.len());
                    let s_marg = data.s.select(Axis(0), &inner.iter().map(|&i| rows[i]).collect::<Vec<_>>());
                    let sm = tape.input(s_marg);
                    let joint = tape.concat_cols(z, sv)?;
                    let marg = tape.concat_cols(z, sm)?;
                    let bound = adv.f.bind(&mut tape);
                    let tj = bound.forward(&mut tape, joint)?;
                    let tm = bound.forward(&mut tape, marg)?;
                    let mj = tape.mean(tj);
                    let lme = tape.log_mean_exp(tm);
                    let dv = tape.sub(mj, lme)?;
                    (dv, tape.scale(dv, penalty_factor), Direction::Ascent, bound, None)
                }
            };
            let value = tape.scalar(objective);
            if !value.is_finite() {
                return Err(diverged(epoch, b, "adversary objective"));
            }
            emit(observer, UpdateStep::Objective, value);
            acc.objective += value;
            let loss_e = tape.add(loss_y, penalty)?;
            if !tape.scalar(loss_e).is_finite() {
                return Err(diverged(epoch, b, "combined loss"));
            }

            // ∂L_E = ∂L_Y + (penalty factor)·∂objective; the L_Y pass never
            // enters the adversary, so this costs one full backward.
            let adv_grads = tape.backward(objective)?;
            let mut enc_grads = enc_bound.grads(&tape.backward(loss_y)?);
            if penalty_factor != 0.0 {
                enc_grads = add_scaled(enc_grads, enc_bound.grads(&adv_grads), penalty_factor);
            }
            step_checked(&mut adv.opt_f, &mut adv.f, f_bound.grads(&adv_grads), adv_dir, at("adversary gradient"))?;
            if let (Some(g), Some(opt), Some(gb)) = (adv.g.as_mut(), adv.opt_g.as_mut(), g_bound) {
                step_checked(opt, g, gb.grads(&adv_grads), adv_dir, at("adversary gradient"))?;
            }
            emit(
                observer,
                if adv_dir == Direction::Ascent {
                    UpdateStep::AdversaryAscent
                } else {
                    UpdateStep::AdversaryDescent
                },
                f64::NAN,
            );
            step_checked(&mut opt_psi, &mut encoder, enc_grads, Direction::Descent, at("encoder gradient"))?;
            emit(observer, UpdateStep::EncoderDescent, f64::NAN);
            acc.batches += 1;
        }
        let nb = acc.batches as f64;
        rows_out.push(EpochRow {
            epoch,
            predictor_loss: acc.loss / nb,
            task_metric: acc.metric / nb,
            adversary_objective: acc.objective / nb,
        });
    }

    let (adv_f, adv_g) = match adversary {
        Some(a) => (Some(a.f), a.g),
        None => (None, None),
    };
    Ok((
        FairModel {
            encoder,
            predictor,
            adv_f,
            adv_g,
        },
        FairRunResult {
            epochs: rows_out,
            final_metrics: None,
        },
    ))
}

fn add_scaled(base: ParamGrads, extra: ParamGrads, factor: f64) -> ParamGrads {
    ParamGrads(
        base.0
            .into_iter()
            .zip(extra.0)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a + &(b * factor)),
                (a, None) => a,
                (None, Some(b)) => Some(b * factor),
            })
            .collect(),
    )
}

/// Held-out metrics of `model` on `test`. HGR and MINE estimators are fitted
/// from scratch on the frozen outputs.
pub fn evaluate(model: &FairModel, test: &Dataset, loss: LossKind, cfg: &EvalConfig, seed: u64) -> Result<FinalMetrics> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs test rows".into()));
    }
    let z = model.latent(&test.x)?;
    let y_hat = model.predictor.predict(&z)?;
    let mut out = FinalMetrics::default();
    let task = task_metric(loss, y_hat.view(), test.y.view());
    if loss.is_classification() {
        out.accuracy = Some(task);
    } else {
        out.mse = Some(task);
    }

    let n = test.len();
    let eval_seed = |stream: u64| SeededRng::derive(seed, STREAM_EVAL * 16 + stream).next_seed();
    let hgr_cfg = |base: &HgrNnConfig, stream: u64| HgrNnConfig {
        batch_size: base.batch_size.min(n),
        seed: eval_seed(stream),
        ..base.clone()
    };
    let single = |m: &Array2<f64>| -> Option<Array1<f64>> { (m.ncols() == 1).then(|| m.column(0).to_owned()) };
    let yhat_1d = single(&y_hat);
    let s_1d = single(&test.s);

    for metric in &cfg.metrics {
        match metric {
            Metric::HgrNnZ => {
                out.hgr_nn_z = Some(metrics::hgr_nn(z.view(), test.s.view(), &hgr_cfg(&cfg.hgr, 1))?.estimate)
            }
            Metric::HgrNnYhat => {
                out.hgr_nn_yhat = Some(metrics::hgr_nn(y_hat.view(), test.s.view(), &hgr_cfg(&cfg.hgr, 2))?.estimate)
            }
            Metric::HgrKdeYhat => {
                if let (Some(u), Some(v)) = (&yhat_1d, &s_1d) {
                    out.hgr_kde_yhat = Some(metrics::hgr_kde(u.view(), v.view(), cfg.kde_bins)?.estimate);
                }
            }
            Metric::HgrRdcYhat => {
                out.hgr_rdc_yhat = Some(
                    metrics::hgr_rdc(y_hat.view(), test.s.view(), cfg.rdc_k, cfg.rdc_s, eval_seed(4))?.estimate,
                );
            }
            Metric::MineYhat => {
                out.mine_yhat = Some(metrics::mine_mi(y_hat.view(), test.s.view(), &hgr_cfg(&cfg.mine, 3))?.estimate)
            }
            Metric::Fairquant => {
                if let (Some(u), Some(v)) = (&yhat_1d, &s_1d) {
                    out.fairquant = Some(metrics::fairquant(u.view(), v.view(), cfg.fairquant_quantiles)?);
                }
            }
        }
    }
    Ok(out)
}
