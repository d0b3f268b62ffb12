//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Rows are batch
//! entries, columns are features. [`Tape::backward`] sweeps the tape once in
//! reverse from a scalar loss and returns the adjoint of every parameter leaf.
//!
//! The op set is exactly what the networks in this crate need: affine layers,
//! activations, batch standardization (differentiated through the batch mean
//! and variance), reductions and a few fused losses.

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    SoftmaxRows,
}

impl Activation {
    /// Applies the activation in place.
    pub fn apply(self, x: &mut Tensor) {
        match self {
            Activation::Identity => {}
            Activation::Relu => x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Sigmoid => x.mapv_inplace(sigmoid),
            Activation::SoftmaxRows => {
                for mut row in x.rows_mut() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
            }
        }
    }

    /// Backward rule written in terms of the activation output `y`.
    fn backward(self, y: &Tensor, grad: &Tensor) -> Tensor {
        match self {
            Activation::Identity => grad.clone(),
            Activation::Relu => {
                Zip::from(grad)
                    .and(y)
                    .map_collect(|&g, &y| if y > 0.0 { g } else { 0.0 })
            }
            Activation::Tanh => Zip::from(grad).and(y).map_collect(|&g, &y| g * (1.0 - y * y)),
            Activation::Sigmoid => Zip::from(grad).and(y).map_collect(|&g, &y| g * y * (1.0 - y)),
            Activation::SoftmaxRows => {
                let mut out = grad * y;
                for (mut row, yrow) in out.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|o, &yv| *o -= yv * dot);
                }
                out
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Probabilities are clamped away from {0, 1} inside the log-losses.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Activation(Var, Activation),
    Standardize { x: Var, inv_std: Array1<f64> },
    Sum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    Mse(Var, Var),
    Bce(Var, Var),
    CrossEntropy(Var, Var),
    LogMeanExp(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b)
            | Op::Mse(a, b)
            | Op::Bce(a, b)
            | Op::CrossEntropy(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Activation(a, _)
            | Op::Standardize { x: a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogMeanExp(a) => vec![a],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Whether any parameter leaf is upstream of this node.
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the parameter leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            op => op.parents().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                left: shape(va),
                right: shape(vb),
            });
        }
        let out = va.dot(vb);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `x + bias` with a 1×m bias row broadcast over the batch.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(Error::Shape {
                op: "add_bias",
                left: shape(vx),
                right: shape(vb),
            });
        }
        let out = vx + vb;
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::Shape {
                op,
                left: shape(va),
                right: shape(vb),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(Op::Scale(a, factor), out)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let vx = self.value(x);
        check_finite("activation input", vx)?;
        let mut out = vx.clone();
        kind.apply(&mut out);
        Ok(self.push(Op::Activation(x, kind), out))
    }

    /// Column-wise `(x - mean) / sqrt(var + eps)` with population batch
    /// statistics. Gradients flow through the mean and the variance.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.nrows();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "standardization needs ≥ 2 samples".into(),
            ));
        }
        let mean = vx.mean_axis(Axis(0)).expect("non-empty batch");
        let mut out = vx - &mean;
        let var = out.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        out *= &inv_std;
        Ok(self.push(Op::Standardize { x, inv_std }, out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Array2::from_elem((1, 1), s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.len() as f64;
        self.push(Op::Mean(x), Array2::from_elem((1, 1), m))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.nrows() != vb.nrows() {
            return Err(Error::Shape {
                op: "concat_cols",
                left: shape(va),
                right: shape(vb),
            });
        }
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("rows agree");
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let loss = Zip::from(p).and(t).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t)) / p.len() as f64;
        Ok(self.push(Op::Mse(pred, target), Array2::from_elem((1, 1), loss)))
    }

    /// Binary cross-entropy of probabilities `prob` against {0,1} targets.
    pub fn bce(&mut self, prob: Var, target: Var) -> Result<Var> {
        self.same_shape("bce", prob, target)?;
        let (p, t) = (self.value(prob), self.value(target));
        let total = Zip::from(p).and(t).fold(0.0, |acc, &p, &t| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            acc - (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        });
        let loss = total / p.len() as f64;
        Ok(self.push(Op::Bce(prob, target), Array2::from_elem((1, 1), loss)))
    }

    /// Categorical cross-entropy of row-probabilities against a column of
    /// class indices.
    pub fn cross_entropy(&mut self, probs: Var, labels: Var) -> Result<Var> {
        let (p, l) = (self.value(probs), self.value(labels));
        if l.ncols() != 1 || l.nrows() != p.nrows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: shape(p),
                right: shape(l),
            });
        }
        let k = p.ncols();
        let mut total = 0.0;
        for (row, &label) in p.rows().into_iter().zip(l.column(0)) {
            let class = label as usize;
            if label < 0.0 || class >= k {
                return Err(Error::InvalidArgument(format!(
                    "class label {label} outside 0..{k}"
                )));
            }
            total -= row[class].max(PROB_FLOOR).ln();
        }
        let loss = total / p.nrows() as f64;
        Ok(self.push(Op::CrossEntropy(probs, labels), Array2::from_elem((1, 1), loss)))
    }

    /// `ln(mean(exp(x)))` over all entries, computed with max-subtraction.
    pub fn log_mean_exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = v.iter().map(|&e| (e - max).exp()).sum::<f64>();
        let out = max + (s / v.len() as f64).ln();
        self.push(Op::LogMeanExp(x), Array2::from_elem((1, 1), out))
    }

    /// Reverse sweep from a 1×1 loss node. Every parameter leaf on the tape
    /// gets an entry; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.dim()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Array2::ones((1, 1)));

        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let accumulate = |adj: &mut [Option<Tensor>], var: Var, g: Tensor| {
            if needs[var.0] {
                accumulate(adj, var, g);
            }
        };
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if needs[a.0] {
                        accumulate(&mut adj, *a, g.dot(&self.value(*b).t()));
                    }
                    if needs[b.0] {
                        accumulate(&mut adj, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddBias(x, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj, *b, db);
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, -&g);
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, factor) => accumulate(&mut adj, *a, g * *factor),
                Op::Activation(x, kind) => {
                    let dx = kind.backward(&node.value, &g);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Standardize { x, inv_std } => {
                    // dx = inv_std * (g - mean(g) - y * mean(g * y)), per column
                    let y = &node.value;
                    let g_mean = g.mean_axis(Axis(0)).expect("non-empty");
                    let gy_mean = (&g * y).mean_axis(Axis(0)).expect("non-empty");
                    let mut dx = &g - &g_mean;
                    dx -= &(y * &gy_mean);
                    dx *= inv_std;
                    accumulate(&mut adj, *x, dx);
                }
                Op::Sum(x) => {
                    let dim = self.value(*x).dim();
                    accumulate(&mut adj, *x, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::Mean(x) => {
                    let v = self.value(*x);
                    let fill = g[[0, 0]] / v.len() as f64;
                    accumulate(&mut adj, *x, Array2::from_elem(v.dim(), fill));
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    let da = g.slice(ndarray::s![.., ..split]).to_owned();
                    let db = g.slice(ndarray::s![.., split..]).to_owned();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (self.value(*p), self.value(*t));
                    let c = 2.0 * g[[0, 0]] / pv.len() as f64;
                    let diff = pv - tv;
                    accumulate(&mut adj, *t, &diff * -c);
                    accumulate(&mut adj, *p, diff * c);
                }
                Op::Bce(p, t) => {
                    let (pv, tv) = (self.value(*p), self.value(*t));
                    let c = g[[0, 0]] / pv.len() as f64;
                    let dp = Zip::from(pv).and(tv).map_collect(|&p, &t| {
                        let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                        -c * (t / p - (1.0 - t) / (1.0 - p))
                    });
                    let dt = Zip::from(pv).map_collect(|&p| {
                        let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                        -c * (p.ln() - (1.0 - p).ln())
                    });
                    accumulate(&mut adj, *p, dp);
                    accumulate(&mut adj, *t, dt);
                }
                Op::CrossEntropy(p, l) => {
                    let (pv, lv) = (self.value(*p), self.value(*l));
                    let c = g[[0, 0]] / pv.nrows() as f64;
                    let mut dp = Array2::zeros(pv.dim());
                    for (i, &label) in lv.column(0).iter().enumerate() {
                        let class = label as usize;
                        dp[[i, class]] = -c / pv[[i, class]].max(PROB_FLOOR);
                    }
                    accumulate(&mut adj, *p, dp);
                }
                Op::LogMeanExp(x) => {
                    let v = self.value(*x);
                    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut w = v.mapv(|e| (e - max).exp());
                    let s = w.sum();
                    w *= g[[0, 0]] / s;
                    accumulate(&mut adj, *x, w);
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| match node.op {
                Op::Param => Some(
                    adj.get_mut(id)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Array2::zeros(node.value.dim())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut adj[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
