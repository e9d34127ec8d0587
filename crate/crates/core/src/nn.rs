//! Dense feed-forward networks with hand-written reverse-mode gradients and Adam.
//!
//! Everything is `f64`. Batches are row-major: one sample per row. A layer
//! computes `activation(x · Wᵀ + b)` with `W` stored as `(out, in)`.
//!
//! Gradients returned by [`Mlp::backward`] are exact gradients of
//! `⟨grad_output, output⟩`, i.e. summed over batch rows. Callers that want a
//! batch mean scale `grad_output` by `1 / batch` before calling.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::{Error, Result};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and the activation output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::LeakyRelu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::LeakyRelu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Anything that owns a fixed list of real-valued parameter tensors.
///
/// The order of tensors must be stable: optimizers, soft updates and
/// checksums pair tensors up by position.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrite every parameter from a flat vector laid out like [`flatten`](Self::flatten).
    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.num_parameters();
        if flat.len() != total {
            return Err(Error::shape("assign_flat", total, flat.len()));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Hash of the exact bit patterns of every parameter.
    fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.tensors() {
            t.len().hash(&mut h);
            for v in t {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weight: Array2<f64>,
    bias: Array1<f64>,
    activation: Activation,
}

impl Dense {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::shape("Dense::new bias", weight.nrows(), bias.len()));
        }
        if weight.ncols() == 0 || weight.nrows() == 0 {
            return Err(Error::shape("Dense::new", "non-empty weight", "0"));
        }
        // Owned arrays built via `from_shape_vec` are standard layout; force it
        // so `as_slice` always succeeds.
        let weight = weight.as_standard_layout().to_owned();
        Ok(Dense {
            weight,
            bias,
            activation,
        })
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = init_bound(inputs);
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..=bound));
        Dense {
            weight,
            bias,
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.bias
    }
}

/// Init range used for every dense layer with the given fan-in.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Intermediate values of one [`Mlp::forward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (layer 0 gets the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Array2<f64>>,
    /// Post-activation of the last layer.
    output: Array2<f64>,
    /// `(in, out)` of each layer at the time of the call.
    signature: Vec<(usize, usize)>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.output.nrows()
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

/// Gradient with the same layout as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrad {
            weights: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.len()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

impl Parameters for MlpGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// A stack of [`Dense`] layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("Mlp::new", "at least one layer", 0));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    "Mlp::new layer chaining",
                    pair[0].outputs(),
                    pair[1].inputs(),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    /// Build `inputs -> hidden[0] -> ... -> outputs`, with `hidden_act` on the
    /// hidden layers and `output_act` on the last one.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(inputs);
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output_act } else { hidden_act };
                Dense::init(w[0], w[1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    fn check_input(&self, input: &ArrayView2<f64>, context: &'static str) -> Result<()> {
        if input.ncols() != self.input_width() {
            return Err(Error::shape(context, self.input_width(), input.ncols()));
        }
        Ok(())
    }

    fn layer_forward(layer: &Dense, x: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut pre = x.dot(&layer.weight.t());
        pre += &layer.bias;
        let act = layer.activation;
        let post = pre.mapv(|v| act.apply(v));
        (pre, post)
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input, "Mlp::predict")?;
        let mut x: Option<Array2<f64>> = None;
        for layer in &self.layers {
            let view = match &x {
                Some(a) => a.view(),
                None => input.view(),
            };
            let (_, post) = Self::layer_forward(layer, &view);
            x = Some(post);
        }
        Ok(x.expect("at least one layer"))
    }

    /// Forward pass returning the output and everything backprop needs.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&input, "Mlp::forward")?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_all = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let (pre, post) = Self::layer_forward(layer, &x.view());
            inputs.push(x);
            pre_all.push(pre);
            x = post;
        }
        let cache = ForwardCache {
            inputs,
            pre: pre_all,
            output: x.clone(),
            signature: self.signature(),
        };
        Ok((x, cache))
    }

    fn signature(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.inputs(), l.outputs()))
            .collect()
    }

    /// Reverse pass: gradients of `⟨grad_output, output⟩` with respect to every
    /// parameter and the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: ArrayView2<f64>,
    ) -> Result<(MlpGrad, Array2<f64>)> {
        if cache.signature != self.signature() {
            return Err(Error::shape(
                "Mlp::backward cache",
                format!("{:?}", self.signature()),
                format!("{:?}", cache.signature),
            ));
        }
        if grad_output.dim() != cache.output.dim() {
            return Err(Error::shape(
                "Mlp::backward grad_output",
                format!("{:?}", cache.output.dim()),
                format!("{:?}", grad_output.dim()),
            ));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut g = grad_output.to_owned();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let post = if k + 1 < n {
                &cache.inputs[k + 1]
            } else {
                &cache.output
            };
            let act = layer.activation;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut g)
                    .and(&cache.pre[k])
                    .and(post)
                    .for_each(|g, &x, &y| *g *= act.derivative(x, y));
            }
            let gw = g.t().dot(&cache.inputs[k]);
            weights.push(if gw.is_standard_layout() {
                gw
            } else {
                gw.as_standard_layout().into_owned()
            });
            biases.push(g.sum_axis(Axis(0)));
            g = g.dot(&layer.weight);
        }
        weights.reverse();
        biases.reverse();
        Ok((MlpGrad { weights, biases }, g))
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers mirror the tensor list of the
/// parameter set it was created for.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Adam {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Non-finite gradients are rejected before anything
    /// is modified.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: Parameters + ?Sized,
        G: Parameters + ?Sized,
    {
        let grad_tensors = grads.tensors();
        if grad_tensors.len() != self.m.len() {
            return Err(Error::shape(
                "Adam::step tensors",
                self.m.len(),
                grad_tensors.len(),
            ));
        }
        for (i, (g, m)) in grad_tensors.iter().zip(&self.m).enumerate() {
            if g.len() != m.len() {
                return Err(Error::shape(
                    "Adam::step tensor",
                    m.len(),
                    format!("{} (tensor {i})", g.len()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {i}")));
            }
        }
        let mut param_tensors = params.tensors_mut();
        if param_tensors.len() != self.m.len() {
            return Err(Error::shape(
                "Adam::step params",
                self.m.len(),
                param_tensors.len(),
            ));
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in param_tensors
            .iter_mut()
            .zip(grad_tensors)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// `target ← τ·online + (1−τ)·target`, tensor by tensor.
pub fn soft_update<P: Parameters + ?Sized>(target: &mut P, online: &P, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!(
            "soft update rate {tau} outside (0, 1]"
        )));
    }
    let src = online.tensors();
    let mut dst = target.tensors_mut();
    if src.len() != dst.len() {
        return Err(Error::shape("soft_update tensors", src.len(), dst.len()));
    }
    for (d, s) in dst.iter().zip(&src) {
        if d.len() != s.len() {
            return Err(Error::shape("soft_update tensor", s.len(), d.len()));
        }
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if tau == 1.0 {
            d.copy_from_slice(s);
        } else {
            for (x, &y) in d.iter_mut().zip(s) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        }
    }
    Ok(())
}
