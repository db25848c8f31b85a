//! Dense networks with exact reverse-mode gradients.
//!
//! Two networks are built from [`Mlp`]: the [`Encoder`], which maps a feature
//! vector to a diagonal Gaussian embedding, and the [`Comparator`], which maps
//! a concatenated pair of embedding points to three order logits.
//!
//! A forward pass that will be differentiated records an [`MlpCache`]. The
//! cache is stamped with the identity of the parameters it was computed with;
//! every parameter mutation restamps the network, so backpropagating a stale
//! cache is reported instead of silently producing wrong gradients.

use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, UolError};
use crate::ordering::OrderRelation;
use crate::{seeded_rng, Rng};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, AtomicOrdering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Layer specs for a chain of widths, e.g. `[16, 64, 64, 3]`.
pub fn chain(widths: &[usize], hidden: Activation, output: Activation) -> Vec<LayerSpec> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec {
            inputs: w[0],
            outputs: w[1],
            activation: if i + 2 == widths.len() { output } else { hidden },
        })
        .collect()
}

/// A fully connected layer. `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(spec: LayerSpec) -> Self {
        Self {
            inputs: spec.inputs,
            outputs: spec.outputs,
            activation: spec.activation,
            weights: vec![0.0; spec.inputs * spec.outputs],
            bias: vec![0.0; spec.outputs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            let pre = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b;
            self.activation.apply(pre)
        }));
    }

    fn check_shape(&self) -> std::result::Result<(), String> {
        if self.inputs == 0 || self.outputs == 0 {
            return Err("layer dimensions must be positive".into());
        }
        if self.weights.len() != self.inputs * self.outputs {
            return Err(format!(
                "weights hold {} values, shape {}x{} needs {}",
                self.weights.len(),
                self.outputs,
                self.inputs,
                self.inputs * self.outputs
            ));
        }
        if self.bias.len() != self.outputs {
            return Err(format!("bias holds {} values, expected {}", self.bias.len(), self.outputs));
        }
        Ok(())
    }
}

/// A feed-forward stack of [`Dense`] layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    stamp: u64,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

/// Accumulated parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(&mut out);
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

impl Mlp {
    /// Network with every weight and bias zero.
    pub fn zeros(spec: &[LayerSpec]) -> Result<Self> {
        Self::from_layers(spec.iter().copied().map(Dense::zeros).collect())
    }

    /// Seeded uniform fan-in initialization; biases start at zero.
    pub fn init(spec: &[LayerSpec], seed: u64) -> Result<Self> {
        Self::init_with(spec, &mut seeded_rng(seed, 0))
    }

    /// Like [`Mlp::init`] but drawing from a caller-owned generator. Weights
    /// are uniform in `±sqrt(6 / fan_in)` before a relu and `±sqrt(3 / fan_in)`
    /// otherwise.
    pub fn init_with(spec: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for layer in &mut net.layers {
            let gain = match layer.activation {
                Activation::Relu => 6.0,
                Activation::Identity => 3.0,
            };
            let bound = (gain / layer.inputs as f64).sqrt();
            layer.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(UolError::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer
                .check_shape()
                .map_err(|e| UolError::InvalidArgument(format!("layer {i}: {e}")))?;
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(UolError::InvalidArgument(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        Ok(Self { layers, stamp: fresh_stamp() })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&current, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<MlpCache> {
        check_dim(self.input_dim(), x.len())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward_into(activations.last().unwrap(), &mut out);
            activations.push(out);
        }
        Ok(MlpCache { stamp: self.stamp, activations })
    }

    /// Backpropagates `d_output` through the cached pass. Parameter gradients
    /// are added into `grads`; the gradient w.r.t. the input is returned.
    pub fn backward(&self, cache: &MlpCache, d_output: &[f64], grads: &mut MlpGrads) -> Result<Vec<f64>> {
        if cache.stamp != self.stamp || cache.activations.len() != self.layers.len() + 1 {
            return Err(UolError::StaleCache);
        }
        check_dim(self.output_dim(), d_output.len())?;
        if grads.weights.len() != self.layers.len() {
            return Err(UolError::DimensionMismatch {
                expected: self.layers.len(),
                found: grads.weights.len(),
            });
        }
        let mut upstream = d_output.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[l];
            let output = &cache.activations[l + 1];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(output)
                .map(|(g, y)| g * layer.activation.derivative_from_output(*y))
                .collect();
            let gw = &mut grads.weights[l];
            let gb = &mut grads.bias[l];
            let mut d_input = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let grow = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    grow[i] += d * input[i];
                    d_input[i] += d * row[i];
                }
            }
            upstream = d_input;
        }
        Ok(upstream)
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut out);
        out
    }

    /// Overwrites every parameter from `flat` (as produced by
    /// [`Mlp::flatten`]) and returns the number of values consumed.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<usize> {
        if flat.len() < self.param_count() {
            return Err(UolError::DimensionMismatch { expected: self.param_count(), found: flat.len() });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        self.stamp = fresh_stamp();
        Ok(offset)
    }

    /// Mutable access to the layers. Restamps the network, invalidating caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }
}

/// A diagonal Gaussian in the embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    pub mu: Vec<f64>,
    pub var_diag: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mu: Vec<f64>, var_diag: Vec<f64>) -> Result<Self> {
        check_dim(mu.len(), var_diag.len())?;
        if mu.iter().any(|x| !x.is_finite()) {
            return Err(UolError::InvalidArgument("mean must be finite".into()));
        }
        if var_diag.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(UolError::InvalidArgument("variances must be positive and finite".into()));
        }
        Ok(Self { mu, var_diag })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Comparator output, indexed `(Approx, Less, Greater)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderLogits(pub [f64; 3]);

impl OrderLogits {
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        check_dim(3, values.len())?;
        Ok(Self([values[0], values[1], values[2]]))
    }

    pub fn get(&self, relation: OrderRelation) -> f64 {
        self.0[relation.one_hot_index()]
    }

    pub fn softmax(&self) -> [f64; 3] {
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = self.0.map(|x| (x - max).exp());
        let z: f64 = e.iter().sum();
        e.map(|x| x / z)
    }

    /// Most likely relation; ties prefer `Approx`, then `Less`.
    pub fn argmax(&self) -> OrderRelation {
        [OrderRelation::Approx, OrderRelation::Less, OrderRelation::Greater]
            .into_iter()
            .fold(OrderRelation::Approx, |best, r| if self.get(r) > self.get(best) { r } else { best })
    }
}

/// Layer widths of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub feature_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl EncoderShape {
    pub fn trunk_spec(&self) -> Vec<LayerSpec> {
        chain(&[self.feature_dim, self.hidden, self.hidden], Activation::Relu, Activation::Relu)
    }

    /// One linear layer emitting `mu` followed by the log-variances.
    pub fn head_spec(&self) -> Vec<LayerSpec> {
        chain(&[self.hidden, 2 * self.embed_dim], Activation::Identity, Activation::Identity)
    }
}

/// Feature vector to Gaussian embedding: a relu trunk and a linear head whose
/// second half is exponentiated into the variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub trunk: Mlp,
    pub head: Mlp,
}

/// Everything needed to backpropagate one encoding.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    pub trunk: MlpCache,
    pub head: MlpCache,
    pub embedding: GaussianEmbedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub trunk: MlpGrads,
    pub head: MlpGrads,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &Encoder) -> Self {
        Self { trunk: MlpGrads::zeros_like(&enc.trunk), head: MlpGrads::zeros_like(&enc.head) }
    }
}

impl Encoder {
    pub fn init_with(shape: EncoderShape, rng: &mut Rng) -> Result<Self> {
        Self::check_shape(shape)?;
        Ok(Self {
            trunk: Mlp::init_with(&shape.trunk_spec(), rng)?,
            head: Mlp::init_with(&shape.head_spec(), rng)?,
        })
    }

    pub fn zeros(shape: EncoderShape) -> Result<Self> {
        Self::check_shape(shape)?;
        Ok(Self { trunk: Mlp::zeros(&shape.trunk_spec())?, head: Mlp::zeros(&shape.head_spec())? })
    }

    fn check_shape(shape: EncoderShape) -> Result<()> {
        if shape.feature_dim == 0 || shape.hidden == 0 || shape.embed_dim == 0 {
            return Err(UolError::InvalidArgument(format!("empty encoder shape {shape:?}")));
        }
        Ok(())
    }

    pub fn from_parts(trunk: Mlp, head: Mlp) -> Result<Self> {
        check_dim(trunk.output_dim(), head.input_dim())?;
        if !head.output_dim().is_multiple_of(2) {
            return Err(UolError::InvalidArgument("encoder head must emit an even width".into()));
        }
        Ok(Self { trunk, head })
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            feature_dim: self.trunk.input_dim(),
            hidden: self.trunk.output_dim(),
            embed_dim: self.head.output_dim() / 2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.head.param_count()
    }

    pub fn encode(&self, features: &[f64]) -> Result<GaussianEmbedding> {
        let hidden = self.trunk.forward(features)?;
        let out = self.head.forward(&hidden)?;
        Self::split_head(&out)
    }

    pub fn encode_cached(&self, features: &[f64]) -> Result<EncoderPass> {
        let trunk = self.trunk.forward_cached(features)?;
        let head = self.head.forward_cached(trunk.output())?;
        let embedding = Self::split_head(head.output())?;
        Ok(EncoderPass { trunk, head, embedding })
    }

    fn split_head(out: &[f64]) -> Result<GaussianEmbedding> {
        let d = out.len() / 2;
        let mu = out[..d].to_vec();
        let var_diag = out[d..].iter().map(|lv| lv.exp()).collect();
        GaussianEmbedding::new(mu, var_diag)
    }

    /// Accumulates parameter gradients given the loss gradient w.r.t. the mean
    /// and the variances of the embedding.
    pub fn backward(
        &self,
        pass: &EncoderPass,
        d_mu: &[f64],
        d_var: &[f64],
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        let d = pass.embedding.dim();
        check_dim(d, d_mu.len())?;
        check_dim(d, d_var.len())?;
        let mut d_head = Vec::with_capacity(2 * d);
        d_head.extend_from_slice(d_mu);
        // var = exp(logvar)
        d_head.extend(d_var.iter().zip(&pass.embedding.var_diag).map(|(g, v)| g * v));
        let d_hidden = self.head.backward(&pass.head, &d_head, &mut grads.head)?;
        self.trunk.backward(&pass.trunk, &d_hidden, &mut grads.trunk)?;
        Ok(())
    }
}

/// Pair of embedding points to order logits through three dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparator {
    pub net: Mlp,
}

impl Comparator {
    pub fn spec(embed_dim: usize, hidden: usize) -> Vec<LayerSpec> {
        chain(&[2 * embed_dim, hidden, hidden, 3], Activation::Relu, Activation::Identity)
    }

    pub fn init_with(embed_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(Mlp::init_with(&Self::spec(embed_dim, hidden), rng)?)
    }

    pub fn new(net: Mlp) -> Result<Self> {
        check_dim(3, net.output_dim())?;
        if !net.input_dim().is_multiple_of(2) {
            return Err(UolError::InvalidArgument("comparator input must be two equal halves".into()));
        }
        Ok(Self { net })
    }

    pub fn embed_dim(&self) -> usize {
        self.net.input_dim() / 2
    }

    fn concat(&self, z1: &[f64], z2: &[f64]) -> Result<Vec<f64>> {
        let d = self.embed_dim();
        check_dim(d, z1.len())?;
        check_dim(d, z2.len())?;
        let mut x = Vec::with_capacity(2 * d);
        x.extend_from_slice(z1);
        x.extend_from_slice(z2);
        Ok(x)
    }

    pub fn compare_points(&self, z1: &[f64], z2: &[f64]) -> Result<OrderLogits> {
        let out = self.net.forward(&self.concat(z1, z2)?)?;
        OrderLogits::from_slice(&out)
    }

    pub fn compare_points_cached(&self, z1: &[f64], z2: &[f64]) -> Result<(OrderLogits, MlpCache)> {
        let cache = self.net.forward_cached(&self.concat(z1, z2)?)?;
        Ok((OrderLogits::from_slice(cache.output())?, cache))
    }

    /// Gradients w.r.t. both points; parameter gradients go into `grads`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_logits: &[f64; 3],
        grads: &mut MlpGrads,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut d_in = self.net.backward(cache, d_logits, grads)?;
        let d2 = d_in.split_off(self.embed_dim());
        Ok((d_in, d2))
    }
}

/// Encoder, comparator and the optional scalar regression head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UolModel {
    pub encoder: Encoder,
    pub comparator: Comparator,
    pub regression_head: Option<Mlp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub comparator: MlpGrads,
    pub regression_head: Option<MlpGrads>,
}

impl ModelGrads {
    pub fn zeros_like(model: &UolModel) -> Self {
        Self {
            encoder: EncoderGrads::zeros_like(&model.encoder),
            comparator: MlpGrads::zeros_like(&model.comparator.net),
            regression_head: model.regression_head.as_ref().map(MlpGrads::zeros_like),
        }
    }

    /// Same order as [`UolModel::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.encoder.trunk.flatten_into(&mut out);
        self.encoder.head.flatten_into(&mut out);
        self.comparator.flatten_into(&mut out);
        if let Some(r) = &self.regression_head {
            r.flatten_into(&mut out);
        }
        out
    }
}

impl UolModel {
    pub fn init(shape: EncoderShape, comparator_hidden: usize, with_regression_head: bool, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, 10);
        let encoder = Encoder::init_with(shape, &mut rng)?;
        let comparator = Comparator::init_with(shape.embed_dim, comparator_hidden, &mut rng)?;
        let regression_head = if with_regression_head {
            Some(Mlp::init_with(&chain(&[shape.hidden, 1], Activation::Identity, Activation::Identity), &mut rng)?)
        } else {
            None
        };
        Self::from_parts(encoder, comparator, regression_head)
    }

    pub fn from_parts(encoder: Encoder, comparator: Comparator, regression_head: Option<Mlp>) -> Result<Self> {
        check_dim(encoder.shape().embed_dim, comparator.embed_dim())?;
        if let Some(r) = &regression_head {
            check_dim(encoder.shape().hidden, r.input_dim())?;
            check_dim(1, r.output_dim())?;
        }
        Ok(Self { encoder, comparator, regression_head })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.comparator.net.param_count()
            + self.regression_head.as_ref().map_or(0, Mlp::param_count)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.trunk.flatten_into(&mut out);
        self.encoder.head.flatten_into(&mut out);
        self.comparator.net.flatten_into(&mut out);
        if let Some(r) = &self.regression_head {
            r.flatten_into(&mut out);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.param_count(), flat.len())?;
        let mut offset = self.encoder.trunk.assign_flat(flat)?;
        offset += self.encoder.head.assign_flat(&flat[offset..])?;
        offset += self.comparator.net.assign_flat(&flat[offset..])?;
        if let Some(r) = &mut self.regression_head {
            r.assign_flat(&flat[offset..])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder_shape() -> EncoderShape {
        EncoderShape { feature_dim: 16, hidden: 64, embed_dim: 16 }
    }

    #[test]
    fn init_is_seeded_and_biases_are_zero() {
        let spec = chain(&[5, 7, 3], Activation::Relu, Activation::Identity);
        let a = Mlp::init(&spec, 9).unwrap();
        let b = Mlp::init(&spec, 9).unwrap();
        let c = Mlp::init(&spec, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        assert!(a.layers().iter().any(|l| l.weights.iter().any(|w| *w != 0.0)));
    }

    #[test]
    fn empty_or_broken_specs_are_rejected() {
        assert!(matches!(Mlp::init(&[], 1), Err(UolError::InvalidArgument(_))));
        let broken = [
            LayerSpec { inputs: 4, outputs: 5, activation: Activation::Relu },
            LayerSpec { inputs: 6, outputs: 2, activation: Activation::Identity },
        ];
        assert!(Mlp::zeros(&broken).is_err());
    }

    #[test]
    fn encoder_parameter_count() {
        let mut rng = seeded_rng(1, 0);
        let enc = Encoder::init_with(encoder_shape(), &mut rng).unwrap();
        assert_eq!(enc.param_count(), 16 * 64 + 64 + 64 * 64 + 64 + 64 * 32 + 32);
    }

    #[test]
    fn zero_encoder_gives_unit_gaussian() {
        let enc = Encoder::zeros(encoder_shape()).unwrap();
        let z = enc.encode(&[0.3; 16]).unwrap();
        assert_eq!(z.mu, vec![0.0; 16]);
        assert_eq!(z.var_diag, vec![1.0; 16]);
    }

    #[test]
    fn encoder_is_pure_and_positive() {
        let enc = Encoder::init_with(encoder_shape(), &mut seeded_rng(3, 0)).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin() * 50.0).collect();
        let a = enc.encode(&x).unwrap();
        assert_eq!(a, enc.encode(&x).unwrap());
        assert!(a.var_diag.iter().all(|v| *v > 0.0));
        assert!(matches!(enc.encode(&[0.0; 3]), Err(UolError::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_comparator_is_uniform() {
        let cmp = Comparator::new(Mlp::zeros(&Comparator::spec(4, 8)).unwrap()).unwrap();
        let logits = cmp.compare_points(&[1.0; 4], &[-2.0; 4]).unwrap();
        assert_eq!(logits.0, [0.0; 3]);
        for p in logits.softmax() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(logits.argmax(), OrderRelation::Approx);
    }

    #[test]
    fn comparator_is_deterministic_and_checks_dims() {
        let cmp = Comparator::init_with(4, 8, &mut seeded_rng(5, 0)).unwrap();
        let (a, b) = ([0.1, 0.2, 0.3, 0.4], [0.4, -0.3, 0.2, 0.0]);
        let ab = cmp.compare_points(&a, &b).unwrap();
        assert_eq!(ab, cmp.compare_points(&a, &b).unwrap());
        assert!(ab.0.iter().all(|x| x.is_finite()));
        let ba = cmp.compare_points(&b, &a).unwrap();
        assert!(ba.0.iter().all(|x| x.is_finite()));
        assert!(cmp.compare_points(&a, &[0.0; 3]).is_err());
    }

    #[test]
    fn argmax_tie_breaking() {
        assert_eq!(OrderLogits([1.0, 1.0, 1.0]).argmax(), OrderRelation::Approx);
        assert_eq!(OrderLogits([0.0, 1.0, 1.0]).argmax(), OrderRelation::Less);
        assert_eq!(OrderLogits([0.0, 0.5, 1.0]).argmax(), OrderRelation::Greater);
    }

    #[test]
    fn linear_network_weight_gradient_is_the_input() {
        let spec = chain(&[3, 2], Activation::Identity, Activation::Identity);
        let net = Mlp::init(&spec, 2).unwrap();
        let x = [0.5, -1.5, 2.0];
        let cache = net.forward_cached(&x).unwrap();
        let mut grads = MlpGrads::zeros_like(&net);
        // d(output_0)/dW
        net.backward(&cache, &[1.0, 0.0], &mut grads).unwrap();
        assert_eq!(&grads.weights[0][..3], &x);
        assert_eq!(&grads.weights[0][3..], &[0.0; 3]);
        assert_eq!(grads.bias[0], vec![1.0, 0.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = Mlp::init(&Comparator::spec(3, 5), 4).unwrap();
        let cache = net.forward_cached(&[0.3; 6]).unwrap();
        let mut grads = MlpGrads::zeros_like(&net);
        let d_in = net.backward(&cache, &[0.0; 3], &mut grads).unwrap();
        assert!(grads.flatten().iter().all(|g| *g == 0.0));
        assert!(d_in.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn stale_cache_is_detected() {
        let mut net = Mlp::init(&Comparator::spec(2, 4), 4).unwrap();
        let cache = net.forward_cached(&[0.3; 4]).unwrap();
        let flat = net.flatten();
        net.assign_flat(&flat).unwrap();
        let mut grads = MlpGrads::zeros_like(&net);
        assert!(matches!(net.backward(&cache, &[1.0; 3], &mut grads), Err(UolError::StaleCache)));
        let other = Mlp::init(&Comparator::spec(2, 4), 4).unwrap();
        let cache = other.forward_cached(&[0.3; 4]).unwrap();
        assert!(matches!(net.backward(&cache, &[1.0; 3], &mut grads), Err(UolError::StaleCache)));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..100u64 {
            let spec = chain(&[4, 6, 5, 3], Activation::Relu, Activation::Identity);
            let mut net = Mlp::init(&spec, seed).unwrap();
            let mut rng = seeded_rng(seed, 99);
            // nonzero biases keep dead units off their kink
            let jittered: Vec<f64> = net.flatten().iter().map(|p| p + rng.random_range(-0.1..0.1)).collect();
            net.assign_flat(&jittered).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |net: &Mlp, x: &[f64]| -> f64 {
                net.forward(x).unwrap().iter().zip(&w).map(|(o, wi)| o * wi).sum()
            };
            let cache = net.forward_cached(&x).unwrap();
            let mut grads = MlpGrads::zeros_like(&net);
            let d_x = net.backward(&cache, &w, &mut grads).unwrap();
            let analytic = grads.flatten();
            let base = net.flatten();
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                net.assign_flat(&p).unwrap();
                let up = loss(&net, &x);
                p[i] -= 2.0 * h;
                net.assign_flat(&p).unwrap();
                let down = loss(&net, &x);
                let numeric = (up - down) / (2.0 * h);
                assert!(rel_err(analytic[i], numeric) < 1e-4, "seed {seed} param {i}");
            }
            net.assign_flat(&base).unwrap();
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += h;
                let up = loss(&net, &xp);
                xp[i] -= 2.0 * h;
                let numeric = (up - loss(&net, &xp)) / (2.0 * h);
                assert!(rel_err(d_x[i], numeric) < 1e-4);
            }
        }
    }

    #[test]
    fn model_flatten_round_trips() {
        let shape = EncoderShape { feature_dim: 3, hidden: 4, embed_dim: 2 };
        let mut model = UolModel::init(shape, 5, true, 8).unwrap();
        let flat = model.flatten();
        assert_eq!(flat.len(), model.param_count());
        let doubled: Vec<f64> = flat.iter().map(|x| 2.0 * x).collect();
        model.assign_flat(&doubled).unwrap();
        assert_eq!(model.flatten(), doubled);
        assert_eq!(ModelGrads::zeros_like(&model).flatten().len(), flat.len());
    }
}
