//! Dense feed-forward networks with manual reverse-mode differentiation.
//!
//! The same [`Network`] type serves as the sensing network and as the
//! second-stage head. Weights are stored row-major as `fan_in x fan_out`, so
//! column `j` of the last layer is the filter for class `j`.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_network, network_to_json, save_network, NetworkFile};
pub use loss::{log_sum_exp, loss_and_logit_grad, one_hot, softmax, LossSpec};
pub use train::{
    argmax, forward_mc_dropout, scaled_schedule, train, train_with, EpochStats, Sgd, TrainConfig, TrainReport,
};

use rand::distr::{Distribution, Uniform};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the activation value `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = activation(W^T x + b)` with `W` stored row-major `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    fan_in: usize,
    fan_out: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(fan_in: usize, fan_out: usize, weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Shape(format!("layer dims must be positive, got {fan_in}x{fan_out}")));
        }
        if fan_in.checked_mul(fan_out) != Some(weights.len()) || bias.len() != fan_out {
            return Err(Error::Shape(format!(
                "layer {fan_in}x{fan_out} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("layer parameters must be finite".into()));
        }
        Ok(Self {
            fan_in,
            fan_out,
            weights,
            bias,
            activation,
        })
    }

    /// Uniform fan-in initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weights = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let bias = (0..fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            fan_in,
            fan_out,
            weights,
            bias,
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.fan_out + j]
    }

    /// Pre-activation `W^T x + b`.
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.fan_out..(i + 1) * self.fan_out];
            for (zj, &w) in z.iter_mut().zip(row) {
                *zj += xi * w;
            }
        }
        z
    }
}

/// A stack of dense layers ending in an identity (logit) layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

impl Network {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::Shape("network needs at least one layer".into()));
        };
        if last.activation != Activation::Identity {
            return Err(Error::Shape("last layer must have identity activation".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].fan_out, pair[1].fan_in
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialised network with layer widths `dims` (input first,
    /// classes last). Hidden layers use `hidden`; the output layer is identity.
    pub fn random(dims: &[usize], hidden: Activation, rng: &mut Rng) -> Result<Self> {
        Self::check_dims(dims)?;
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { Activation::Identity } else { hidden };
                DenseLayer::init(dims[l], dims[l + 1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn zeros(dims: &[usize], hidden: Activation) -> Result<Self> {
        Self::check_dims(dims)?;
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { Activation::Identity } else { hidden };
                DenseLayer::zeros(dims[l], dims[l + 1], act)
            })
            .collect();
        Self::from_layers(layers)
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 {
            return Err(Error::Parameter("need at least input and output dims".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Parameter(format!("layer dims must be positive: {dims:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn num_classes(&self) -> usize {
        self.last_layer().fan_out
    }

    /// Width of the features entering the last layer.
    pub fn penultimate_dim(&self) -> usize {
        self.last_layer().fan_in
    }

    pub fn last_layer(&self) -> &DenseLayer {
        self.layers.last().expect("non-empty by construction")
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.fan_out))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.forward_impl(x, None)
    }

    /// Forward pass with inverted dropout on every hidden activation.
    pub fn forward_dropout(&self, x: &[f64], rate: f64, rng: &mut Rng) -> Result<ForwardTrace> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if rate == 0.0 {
            return self.forward_impl(x, None);
        }
        self.forward_impl(x, Some((rate, rng)))
    }

    fn forward_impl(&self, x: &[f64], mut dropout: Option<(f64, &mut Rng)>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let n = self.layers.len();
        let mut activations = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        activations.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&activations[l]);
            let mut a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            let mut mask = None;
            if l + 1 < n {
                if let Some((rate, rng)) = dropout.as_mut() {
                    let keep = 1.0 / (1.0 - *rate);
                    let m: Vec<f64> = (0..a.len())
                        .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
                        .collect();
                    for (ai, mi) in a.iter_mut().zip(&m) {
                        *ai *= mi;
                    }
                    mask = Some(m);
                }
            }
            pre.push(z);
            masks.push(mask);
            activations.push(a);
        }
        Ok(ForwardTrace { activations, pre, masks })
    }

    /// Logits only.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut t = self.forward(x)?;
        Ok(t.activations.pop().expect("trace has output"))
    }

    fn check_trace(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Result<()> {
        if trace.pre.len() != self.layers.len()
            || trace.pre.iter().zip(&self.layers).any(|(z, l)| z.len() != l.fan_out)
            || trace.activations[0].len() != self.input_dim()
        {
            return Err(Error::Shape("trace was not produced by this network".into()));
        }
        if dlogits.len() != self.num_classes() {
            return Err(Error::Shape(format!(
                "upstream gradient has length {}, network has {} outputs",
                dlogits.len(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Full reverse pass: gradients for every parameter and for the input.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros(self);
        self.backward_into(trace, dlogits, &mut grads, true)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `acc`. When `with_input` is set,
    /// `acc.input` is overwritten with the gradient with respect to the input.
    pub fn backward_into(&self, trace: &ForwardTrace, dlogits: &[f64], acc: &mut GradientSet, with_input: bool) -> Result<()> {
        self.check_trace(trace, dlogits)?;
        let mut delta = dlogits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            // delta is dJ/d(output of layer l); turn it into dJ/d(pre-activation).
            for (j, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(trace.pre[l][j], raw_activation(trace, l, j));
            }
            let input = &trace.activations[l];
            let gw = &mut acc.weights[l];
            let fo = layer.fan_out;
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &mut gw[i * fo..(i + 1) * fo];
                for (g, &d) in row.iter_mut().zip(&delta) {
                    *g += a * d;
                }
            }
            for (g, &d) in acc.biases[l].iter_mut().zip(&delta) {
                *g += d;
            }
            if l > 0 || with_input {
                let mut next = layer_input_grad(layer, &delta);
                if l > 0 {
                    if let Some(mask) = &trace.masks[l - 1] {
                        for (n, m) in next.iter_mut().zip(mask) {
                            *n *= m;
                        }
                    }
                }
                delta = next;
            }
        }
        if with_input {
            acc.input = delta;
        }
        Ok(())
    }

    /// Gradient of the final-layer weights only (`fan_in x fan_out`
    /// row-major): the outer product of penultimate features and `dlogits`.
    pub fn final_layer_grad(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Result<Vec<f64>> {
        self.check_trace(trace, dlogits)?;
        let h = trace.penultimate();
        let n = dlogits.len();
        let mut g = vec![0.0; h.len() * n];
        for (i, &hi) in h.iter().enumerate() {
            for (j, &d) in dlogits.iter().enumerate() {
                g[i * n + j] = hi * d;
            }
        }
        Ok(g)
    }

    /// Gradient with respect to the input for upstream `dlogits`, plus an
    /// optional extra gradient injected directly at the penultimate features.
    pub fn input_grad(&self, trace: &ForwardTrace, dlogits: &[f64], extra_penultimate: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_trace(trace, dlogits)?;
        let last = self.layers.len() - 1;
        let mut delta = dlogits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            for (j, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(trace.pre[l][j], raw_activation(trace, l, j));
            }
            let mut next = layer_input_grad(layer, &delta);
            if l == last {
                if let Some(extra) = extra_penultimate {
                    if extra.len() != next.len() {
                        return Err(Error::Shape("penultimate gradient length".into()));
                    }
                    for (n, e) in next.iter_mut().zip(extra) {
                        *n += e;
                    }
                }
            }
            if l > 0 {
                if let Some(mask) = &trace.masks[l - 1] {
                    for (n, m) in next.iter_mut().zip(mask) {
                        *n *= m;
                    }
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Activation value before any dropout mask was applied.
#[inline]
fn raw_activation(trace: &ForwardTrace, l: usize, j: usize) -> f64 {
    match &trace.masks[l] {
        Some(m) if m[j] != 0.0 => trace.activations[l + 1][j] / m[j],
        Some(_) => 0.0,
        None => trace.activations[l + 1][j],
    }
}

fn layer_input_grad(layer: &DenseLayer, delta: &[f64]) -> Vec<f64> {
    let fo = layer.fan_out;
    (0..layer.fan_in)
        .map(|i| {
            layer.weights[i * fo..(i + 1) * fo]
                .iter()
                .zip(delta)
                .map(|(w, d)| w * d)
                .sum()
        })
        .collect()
}

/// Everything recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is the output of
    /// layer `l` after dropout.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn penultimate(&self) -> &[f64] {
        &self.activations[self.activations.len() - 2]
    }

    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("trace has output")
    }

    pub fn pre_activation(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }

    pub fn activation(&self, layer: usize) -> &[f64] {
        &self.activations[layer + 1]
    }
}

/// Per-layer parameter gradients plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(net: &Network) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            input: vec![0.0; net.input_dim()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for g in v {
                *g *= s;
            }
        }
    }

    pub fn clear(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.fill(0.0);
        }
        self.input.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn identity2() -> Network {
        let layer = DenseLayer::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Identity).unwrap();
        Network::from_layers(vec![layer]).unwrap()
    }

    /// Straight-line reference forward pass, independent of `DenseLayer::affine`.
    fn matmul_oracle(net: &Network, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in net.layers() {
            let mut out = Vec::with_capacity(layer.fan_out());
            for j in 0..layer.fan_out() {
                let mut z = layer.bias()[j];
                for i in 0..layer.fan_in() {
                    z += a[i] * layer.weight(i, j);
                }
                out.push(match layer.activation() {
                    Activation::Relu => if z > 0.0 { z } else { 0.0 },
                    Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                    Activation::Identity => z,
                });
            }
            a = out;
        }
        a
    }

    #[test]
    fn identity_layer_passes_input_through() {
        assert_eq!(identity2().logits(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let net = Network::zeros(&[5, 4, 3], Activation::Relu).unwrap();
        assert_eq!(net.logits(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn forward_matches_matmul_oracle() {
        let mut r = rng::rng(5);
        for act in [Activation::Relu, Activation::Sigmoid] {
            let net = Network::random(&[7, 6, 5, 4], act, &mut r).unwrap();
            let x: Vec<f64> = (0..7).map(|_| r.random_range(-1.0..1.0)).collect();
            let got = net.logits(&x).unwrap();
            let want = matmul_oracle(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logits_equal_last_layer_affine_of_penultimate() {
        let mut r = rng::rng(6);
        let net = Network::random(&[4, 8, 3], Activation::Relu, &mut r).unwrap();
        let t = net.forward(&[0.1, 0.2, -0.3, 0.4]).unwrap();
        let last = net.last_layer();
        for j in 0..3 {
            let z: f64 = last.bias()[j] + t.penultimate().iter().enumerate().map(|(i, h)| h * last.weight(i, j)).sum::<f64>();
            assert!((z - t.logits()[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn input_length_is_checked() {
        assert!(matches!(identity2().forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng::rng(8);
        let net = Network::random(&[3, 4, 2], Activation::Sigmoid, &mut r).unwrap();
        let t = net.forward(&[0.3, -0.2, 0.9]).unwrap();
        let g = net.backward(&t, &[0.0, 0.0]).unwrap();
        assert!(g.weights.iter().chain(&g.biases).flatten().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_outer_product() {
        let (a, b) = (0.7, -1.3);
        let t = identity2().forward(&[1.0, 0.0]).unwrap();
        let g = identity2().backward(&t, &[a, b]).unwrap();
        // row-major fan_in x fan_out: column 0 = [w00, w10], column 1 = [w01, w11]
        assert_eq!([g.weights[0][0], g.weights[0][2]], [a, 0.0]);
        assert_eq!([g.weights[0][1], g.weights[0][3]], [b, 0.0]);
    }

    #[test]
    fn final_layer_gradient_is_rank_one() {
        let mut r = rng::rng(9);
        let net = Network::random(&[6, 5, 4, 3], Activation::Relu, &mut r).unwrap();
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let t = net.forward(&x).unwrap();
        let d = [0.3, -0.1, 0.25];
        let full = net.backward(&t, &d).unwrap();
        let direct = net.final_layer_grad(&t, &d).unwrap();
        assert_eq!(full.weights.last().unwrap(), &direct);
        for (i, h) in t.penultimate().iter().enumerate() {
            for j in 0..3 {
                assert_eq!(direct[i * 3 + j], h * d[j]);
            }
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut r = rng::rng(10);
        let a = Network::random(&[3, 4, 2], Activation::Relu, &mut r).unwrap();
        let b = Network::random(&[3, 5, 2], Activation::Relu, &mut r).unwrap();
        let t = a.forward(&[0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(b.backward(&t, &[1.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn last_layer_must_be_identity() {
        let l = DenseLayer::zeros(2, 2, Activation::Relu);
        assert!(Network::from_layers(vec![l]).is_err());
    }
}
