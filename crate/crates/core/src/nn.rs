//! Small fully-connected networks and Adam.
//!
//! Architectures use the compact table notation `FC:<width> <act>`, comma
//! separated, with `act` one of `R`, `T`, `Sig`, `SM`, `None` (or omitted for
//! a linear layer): `"FC:64 R, FC:64 R, FC:1"`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Activation, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// Parsed architecture string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture(pub Vec<LayerSpec>);

impl Architecture {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.0
    }

    pub fn output_dim(&self) -> usize {
        self.0.last().map_or(0, |l| l.width)
    }
}

fn activation_token(a: Activation) -> Option<&'static str> {
    match a {
        Activation::Identity => None,
        Activation::Relu => Some("R"),
        Activation::Tanh => Some("T"),
        Activation::Sigmoid => Some("Sig"),
        Activation::SoftmaxRows => Some("SM"),
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: String| Error::Config(format!("architecture {s:?}: {detail}"));
        let mut layers = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let mut tokens = part.split_whitespace();
            let fc = tokens.next().unwrap_or_default();
            let width = fc
                .strip_prefix("FC:")
                .ok_or_else(|| bad(format!("layer {part:?} must start with FC:")))?
                .parse::<usize>()
                .map_err(|e| bad(format!("layer {part:?}: {e}")))?;
            if width == 0 {
                return Err(bad("layer width must be ≥ 1".into()));
            }
            let activation = match tokens.next() {
                None | Some("None") => Activation::Identity,
                Some("R") => Activation::Relu,
                Some("T") => Activation::Tanh,
                Some("Sig") => Activation::Sigmoid,
                Some("SM") => Activation::SoftmaxRows,
                Some(other) => return Err(bad(format!("unknown activation {other:?}"))),
            };
            if let Some(extra) = tokens.next() {
                return Err(bad(format!("unexpected token {extra:?}")));
            }
            layers.push(LayerSpec { width, activation });
        }
        if layers.is_empty() {
            return Err(bad("empty architecture".into()));
        }
        Ok(Architecture(layers))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, layer) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "FC:{}", layer.width)?;
            if let Some(tok) = activation_token(layer.activation) {
                write!(f, " {tok}")?;
            }
        }
        Ok(())
    }
}

impl Serialize for Architecture {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// in_dim × out_dim
    pub weight: Tensor,
    /// 1 × out_dim
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    input_dim: usize,
    seed: u64,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(arch: &Architecture, input_dim: usize, seed: u64) -> Result<Self> {
        if arch.0.is_empty() {
            return Err(Error::InvalidArgument("empty architecture".into()));
        }
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be ≥ 1".into()));
        }
        let mut rng = SeededRng::new(seed);
        let mut fan_in = input_dim;
        let mut layers = Vec::with_capacity(arch.0.len());
        for spec in &arch.0 {
            if spec.width == 0 {
                return Err(Error::InvalidArgument("layer width must be ≥ 1".into()));
            }
            let limit = (6.0 / (fan_in + spec.width) as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_in, spec.width), || {
                rng.uniform_range(-limit, limit)
            });
            layers.push(Layer {
                weight,
                bias: Array2::zeros((1, spec.width)),
                activation: spec.activation,
            });
            fan_in = spec.width;
        }
        Ok(Self {
            layers,
            input_dim,
            seed,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture(
            self.layers
                .iter()
                .map(|l| LayerSpec {
                    width: l.weight.ncols(),
                    activation: l.activation,
                })
                .collect(),
        )
    }

    /// Parameter tensors in canonical order: w0, b0, w1, b1, ...
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn param_name(index: usize) -> String {
        let kind = if index % 2 == 0 { "weight" } else { "bias" };
        format!("layer{}.{}", index / 2, kind)
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Tape-free forward pass, used for evaluation.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape {
                op: "mlp_forward",
                left: x.dim(),
                right: (self.input_dim, self.output_dim()),
            });
        }
        let mut h = x.dot(&self.layers[0].weight);
        h += &self.layers[0].bias;
        self.layers[0].activation.apply(&mut h);
        for layer in &self.layers[1..] {
            let mut next = h.dot(&layer.weight);
            next += &layer.bias;
            layer.activation.apply(&mut next);
            h = next;
        }
        Ok(h)
    }

    /// Registers the parameters on `tape` as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let vars = self.params().map(|p| tape.param(p.clone())).collect();
        BoundMlp {
            vars,
            activations: self.layers.iter().map(|l| l.activation).collect(),
            input_dim: self.input_dim,
        }
    }

    /// Binds and runs one forward pass.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, BoundMlp)> {
        let bound = self.bind(tape);
        let out = bound.forward(tape, x)?;
        Ok((out, bound))
    }
}

/// An [`Mlp`]'s parameters as they live on one tape. One binding can be
/// applied to several inputs; gradients then accumulate across uses.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<Var>,
    activations: Vec<Activation>,
    input_dim: usize,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = tape.value(x).ncols();
        if width != self.input_dim {
            return Err(Error::Shape {
                op: "mlp_forward",
                left: tape.value(x).dim(),
                right: tape.value(self.vars[0]).dim(),
            });
        }
        let mut h = x;
        for (k, act) in self.activations.iter().enumerate() {
            let lin = tape.matmul(h, self.vars[2 * k])?;
            let biased = tape.add_bias(lin, self.vars[2 * k + 1])?;
            h = match act {
                Activation::Identity => biased,
                _ => tape.activation(biased, *act)?,
            };
        }
        Ok(h)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn grads(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads(self.vars.iter().map(|v| grads.get(*v).cloned()).collect())
    }
}

/// Gradients for one network, in [`Mlp::params`] order.
#[derive(Clone, Debug)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn scaled(mut self, factor: f64) -> Self {
        for g in self.0.iter_mut().flatten() {
            *g *= factor;
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// Adam with bias correction. One instance per network.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        Self::for_shapes(mlp.params().map(|p| p.dim()), lr)
    }

    pub fn for_shapes(shapes: impl IntoIterator<Item = (usize, usize)>, lr: f64) -> Self {
        let (first, second) = shapes
            .into_iter()
            .map(|d| (Array2::zeros(d), Array2::zeros(d)))
            .unzip();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &ParamGrads, direction: Direction) -> Result<()> {
        if grads.0.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} gradient entries, got {}",
                self.first.len(),
                grads.0.len()
            )));
        }
        if let Some(i) = grads.0.iter().position(Option::is_none) {
            return Err(Error::MissingGradient(Mlp::param_name(i)));
        }
        let mut params: Vec<&mut Tensor> = mlp.params_mut().collect();
        let tensors = grads.0.iter().map(|g| g.as_ref().expect("checked above"));
        self.update(&mut params, tensors, direction)
    }

    /// Update for raw tensors; `params` and `grads` line up with the shapes
    /// given at construction.
    pub fn update<'a>(
        &mut self,
        params: &mut [&mut Tensor],
        grads: impl Iterator<Item = &'a Tensor>,
        direction: Direction,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let sign = match direction {
            Direction::Descent => -1.0,
            Direction::Ascent => 1.0,
        };
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let step_size = sign * self.lr;
        for (i, g) in grads.enumerate() {
            let p = &mut params[i];
            if p.dim() != g.dim() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.dim(),
                    right: g.dim(),
                });
            }
            ndarray::Zip::from(&mut **p)
                .and(&mut self.first[i])
                .and(&mut self.second[i])
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w += step_size * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn arch(s: &str) -> Architecture {
        s.parse().unwrap()
    }

    #[test]
    fn parses_table_notation() {
        let a = arch("FC:16 R, FC:8 R, FC:4 R, FC:1 Sig");
        assert_eq!(a.0.len(), 4);
        assert_eq!(a.0[3].activation, Activation::Sigmoid);
        assert_eq!(arch("FC:64 T,FC:1").0[1].activation, Activation::Identity);
        assert_eq!(arch("FC:10 SM").0[0].activation, Activation::SoftmaxRows);
        assert_eq!(arch("FC:2 None").to_string(), "FC:2");
        assert_eq!(arch("FC:128 R, FC:64 R,FC:64").to_string(), "FC:128 R, FC:64 R, FC:64");
        for bad in ["", "FC:0", "Dense:3", "FC:3 Q", "FC:x R"] {
            assert!(bad.parse::<Architecture>().is_err(), "{bad}");
        }
    }

    #[test]
    fn single_identity_layer_shape() {
        let m = Mlp::new(&arch("FC:1"), 1, 99).unwrap();
        assert_eq!(m.layers().len(), 1);
        assert_eq!(m.layers()[0].weight.dim(), (1, 1));
        assert_eq!(m.layers()[0].bias, array![[0.0]]);
    }

    #[test]
    fn empty_spec_is_an_error() {
        assert!(Mlp::new(&Architecture(vec![]), 2, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::new(&arch("FC:8 R, FC:1"), 3, 4).unwrap();
        let b = Mlp::new(&arch("FC:8 R, FC:1"), 3, 4).unwrap();
        assert_eq!(a, b);
        let c = Mlp::new(&arch("FC:8 R, FC:1"), 3, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_limits_respected() {
        let m = Mlp::new(&arch("FC:64 R, FC:1"), 2, 1).unwrap();
        let limit = (6.0f64 / 66.0).sqrt();
        assert!(m.layers()[0].weight.iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn adversary_parameter_count() {
        let m = Mlp::new(&arch("FC:64 R, FC:64 R, FC:1"), 2, 0).unwrap();
        assert_eq!(m.param_count(), 2 * 64 + 64 + 64 * 64 + 64 + 64 + 1);
        assert_eq!(m.param_count(), 4417);
    }

    #[test]
    fn zero_network_with_sigmoid_head_outputs_half() {
        let mut m = Mlp::new(&arch("FC:4 R, FC:1 Sig"), 3, 0).unwrap();
        for l in m.layers_mut() {
            l.weight.fill(0.0);
        }
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        assert_eq!(m.predict(&x).unwrap(), array![[0.5], [0.5]]);
    }

    #[test]
    fn identity_layer_is_affine_map() {
        let mut m = Mlp::new(&arch("FC:2"), 2, 0).unwrap();
        m.layers_mut()[0].bias = array![[0.5, -1.0]];
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let expected = x.dot(&m.layers()[0].weight) + &array![[0.5, -1.0]];
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let (out, _) = m.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(out), &expected);
        assert_eq!(m.predict(&x).unwrap(), expected);
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let m = Mlp::new(&arch("FC:5 R, FC:3 T, FC:1 Sig"), 2, 17).unwrap();
        let x = array![[0.3, -1.2], [2.0, 0.7], [-0.4, -0.9]];
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let (out, _) = m.forward(&mut tape, xv).unwrap();
        for r in 0..3 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for layer in m.layers() {
                let mut next = vec![0.0; layer.weight.ncols()];
                for (j, n) in next.iter_mut().enumerate() {
                    let mut acc = layer.bias[[0, j]];
                    for (i, hv) in h.iter().enumerate() {
                        acc += hv * layer.weight[[i, j]];
                    }
                    *n = match layer.activation {
                        Activation::Relu => acc.max(0.0),
                        Activation::Tanh => acc.tanh(),
                        Activation::Sigmoid => 1.0 / (1.0 + (-acc).exp()),
                        _ => acc,
                    };
                }
                h = next;
            }
            assert!((tape.value(out)[[r, 0]] - h[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shape_mismatch() {
        let m = Mlp::new(&arch("FC:2"), 3, 0).unwrap();
        assert!(m.predict(&Array2::zeros((4, 2))).is_err());
        let mut tape = Tape::new();
        let x = tape.input(Array2::zeros((4, 2)));
        assert!(m.forward(&mut tape, x).is_err());
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        // 3-layer network, loss = mean((net(x) - y)^2), 20 random coordinates
        let m = Mlp::new(&arch("FC:6 T, FC:4 Sig, FC:1"), 3, 23).unwrap();
        let mut rng = SeededRng::new(4);
        let x = Array2::from_shape_fn((8, 3), |_| rng.uniform_range(-2.0, 2.0));
        let y = Array2::from_shape_fn((8, 1), |_| rng.uniform_range(-2.0, 2.0));
        let loss_of = |net: &Mlp| -> f64 {
            let p = net.predict(&x).unwrap();
            (&p - &y).mapv(|d| d * d).mean().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let yv = tape.input(y.clone());
        let (out, bound) = m.forward(&mut tape, xv).unwrap();
        let loss = tape.mse(out, yv).unwrap();
        let grads = bound.grads(&tape.backward(loss).unwrap());
        let h = 1e-5;
        for _ in 0..20 {
            let layer = (rng.uniform() * 3.0) as usize;
            let is_bias = rng.bernoulli(0.3);
            let mut plus = m.clone();
            let mut minus = m.clone();
            let (r, c) = {
                let t = if is_bias { &m.layers()[layer].bias } else { &m.layers()[layer].weight };
                ((rng.uniform() * t.nrows() as f64) as usize, (rng.uniform() * t.ncols() as f64) as usize)
            };
            for (net, d) in [(&mut plus, h), (&mut minus, -h)] {
                let l = &mut net.layers_mut()[layer];
                let t = if is_bias { &mut l.bias } else { &mut l.weight };
                t[[r, c]] += d;
            }
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let analytic = grads.0[2 * layer + usize::from(is_bias)].as_ref().unwrap()[[r, c]];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            assert!(rel < 1e-5, "layer {layer} bias={is_bias} ({r},{c}): {analytic} vs {numeric}");
        }
    }

    #[test]
    fn adam_zero_gradients_leave_params() {
        let mut m = Mlp::new(&arch("FC:3 R, FC:1"), 2, 1).unwrap();
        let before = m.clone();
        let mut adam = Adam::new(&m, 1e-2);
        let zeros = ParamGrads(m.params().map(|p| Some(Array2::zeros(p.dim()))).collect());
        adam.step(&mut m, &zeros, Direction::Descent).unwrap();
        assert_eq!(m, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_descent_then_ascent_does_not_undo() {
        let mut m = Mlp::new(&arch("FC:3 R, FC:1"), 2, 1).unwrap();
        let before = m.clone();
        let mut adam = Adam::new(&m, 1e-2);
        let g = ParamGrads(m.params().map(|p| Some(Array2::from_elem(p.dim(), 0.3))).collect());
        adam.step(&mut m, &g, Direction::Descent).unwrap();
        adam.step(&mut m, &g, Direction::Ascent).unwrap();
        assert_ne!(m, before);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn adam_missing_gradient_names_parameter() {
        let mut m = Mlp::new(&arch("FC:3 R, FC:1"), 2, 1).unwrap();
        let mut adam = Adam::new(&m, 1e-2);
        let mut entries: Vec<Option<Tensor>> = m.params().map(|p| Some(Array2::zeros(p.dim()))).collect();
        entries[3] = None;
        let err = adam.step(&mut m, &ParamGrads(entries), Direction::Descent).unwrap_err();
        assert!(err.to_string().contains("layer1.bias"), "{err}");
    }

    fn quadratic_run(start: f64, lr: f64, steps: usize) -> Vec<f64> {
        let mut w = Array2::from_elem((1, 1), start);
        let mut adam = Adam::for_shapes([(1, 1)], lr);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let g = Array2::from_elem((1, 1), 2.0 * (w[[0, 0]] - 3.0));
            adam.update(&mut [&mut w], std::iter::once(&g), Direction::Descent).unwrap();
            losses.push((w[[0, 0]] - 3.0).powi(2));
        }
        losses
    }

    #[test]
    fn adam_minimizes_scalar_quadratic() {
        let losses = quadratic_run(0.0, 0.1, 500);
        let w_err = losses.last().unwrap().sqrt();
        assert!(w_err < 1e-3, "|w - 3| = {w_err}");
    }

    #[test]
    fn adam_descent_is_monotone_after_warmup() {
        // far from the optimum relative to the step size
        let losses = quadratic_run(-5.0, 0.01, 400);
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
    }
}
