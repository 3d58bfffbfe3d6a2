//! Feedforward classifiers with explicit reverse-pass formulas.
//!
//! A model is a chain of affine layers `x ↦ x·W + b` with a fixed hidden
//! nonlinearity between them and none after the last layer, so the output is
//! raw class logits.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::{Fnv, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given the pre-activation `z` and the activation value `a`.
    /// The relu subgradient at exactly zero is taken as zero.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn tag(self) -> u64 {
        match self {
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }
}

/// One affine map: `weight` is `in x out`, `bias` is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(shape_err!(
                "bias must be 1x{}, got {}x{}",
                weight.cols(),
                bias.rows(),
                bias.cols()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
}

impl MlpParams {
    /// Rejects an empty layer list or any break in the dimension chain.
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err!("a model needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(shape_err!(
                    "layer {k} outputs {} columns but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                ));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Gaussian fan-in initialisation (variance `1/in` for tanh, `2/in` for
    /// relu) with zero biases. `dims` lists input, hidden and output sizes.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(shape_err!("dims must list at least input and output sizes, all positive: {dims:?}"));
        }
        let gain = match activation {
            Activation::Tanh => 1.0,
            Activation::Relu => 2.0,
        };
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (gain / w[0] as f64).sqrt();
                let weight = Matrix::from_fn(w[0], w[1], |_, _| std * rng.sample::<f64, _>(StandardNormal));
                Layer { weight, bias: Matrix::zeros(1, w[1]) }
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Input, hidden and output sizes.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Layer::out_dim)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.as_slice().len()).sum()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(self.activation.tag());
        for layer in &self.layers {
            h.write(layer.weight.checksum());
            h.write(layer.bias.checksum());
        }
        h.finish()
    }

    /// Every scalar parameter, layer by layer, weight before bias.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.as_slice()))
            .copied()
            .collect()
    }

    pub(crate) fn param_mut(&mut self, flat_index: usize) -> &mut f64 {
        let mut idx = flat_index;
        for layer in &mut self.layers {
            let nw = layer.weight.as_slice().len();
            if idx < nw {
                return &mut layer.weight.as_mut_slice()[idx];
            }
            idx -= nw;
            let nb = layer.bias.as_slice().len();
            if idx < nb {
                return &mut layer.bias.as_mut_slice()[idx];
            }
            idx -= nb;
        }
        panic!("parameter index {flat_index} out of range");
    }

    pub fn forward(&self, features: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if features.cols() != self.input_dim() {
            return Err(shape_err!(
                "layer 0 expects {} input columns, got {}",
                self.input_dim(),
                features.cols()
            ));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut current = features.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias)?;
            inputs.push(current);
            if k == last {
                current = z;
            } else {
                current = z.map(|v| self.activation.apply(v));
                pre.push(z);
            }
        }
        if !current.is_finite() {
            return Err(Error::Numeric("forward pass produced non-finite logits".into()));
        }
        let cache = ForwardCache { inputs, pre, batch: features.rows(), model_checksum: self.checksum() };
        Ok((current, cache))
    }

    /// Logits only.
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        self.forward(features).map(|(logits, _)| logits)
    }

    /// Gradients of a scalar loss given its derivative with respect to the
    /// logits. No batch rescaling happens here; the loss owns its reduction.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Matrix) -> Result<ParamGrads> {
        if cache.model_checksum != self.checksum() || cache.inputs.len() != self.layers.len() {
            return Err(Error::Contract("forward cache was produced by different parameters".into()));
        }
        if d_logits.shape() != (cache.batch, self.output_dim()) {
            return Err(shape_err!(
                "upstream gradient must be {}x{}, got {}x{}",
                cache.batch,
                self.output_dim(),
                d_logits.rows(),
                d_logits.cols()
            ));
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = d_logits.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let weight = cache.inputs[k].t_matmul(&delta)?;
            let bias = delta.sum_rows();
            grads.push(Layer { weight, bias });
            if k > 0 {
                let mut back = delta.matmul_t(&layer.weight)?;
                let z = &cache.pre[k - 1];
                let a = &cache.inputs[k];
                for ((g, &zv), &av) in back.as_mut_slice().iter_mut().zip(z.as_slice()).zip(a.as_slice()) {
                    *g *= self.activation.derivative(zv, av);
                }
                delta = back;
            }
        }
        grads.reverse();
        Ok(ParamGrads { layers: grads })
    }
}

/// Per-layer values retained by [`MlpParams::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    batch: usize,
    model_checksum: u64,
}

/// Gradient of a scalar loss with respect to every parameter, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(model: &MlpParams) -> Self {
        Self { layers: model.layers.iter().map(Layer::zeros_like).collect() }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.as_slice()))
            .copied()
            .collect()
    }

    pub fn matches(&self, model: &MlpParams) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(g, p)| g.weight.shape() == p.weight.shape() && g.bias.shape() == p.bias.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}
