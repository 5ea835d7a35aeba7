//! Fully connected layers, Kaiming initialization and a functional MLP
//! forward pass.
//!
//! Parameters are passed per call rather than owned by layers, so tensors
//! produced by a hypernetwork stay on the differentiation path of its own
//! weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{activation, add_bias, matmul_nt, Activation, Tensor};

/// One fully connected layer: `out = A(W x + b)` with `W` of shape
/// `(out_dim, in_dim)`.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Ownership role of a parameter collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    PrimaryTheta,
    IndependentTheta0,
    HypernetOmega,
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    pub role: Role,
}

impl ParamSet {
    pub fn new(role: Role) -> Self {
        ParamSet {
            entries: Vec::new(),
            role,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|(_, t)| t).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// All scalar values concatenated in entry order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_scalars());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.data());
        }
        out
    }
}

/// Fan mode for Kaiming initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FanMode {
    FanIn,
    FanOut,
}

/// Squared gain for an activation, as used by He-style initialization.
pub fn gain_squared(act: Activation) -> f64 {
    match act {
        Activation::Relu => 2.0,
        Activation::LeakyRelu(a) => 2.0 / (1.0 + a * a),
        // One fixed table so tests are deterministic.
        Activation::Linear | Activation::Tanh | Activation::Gelu | Activation::Silu => 1.0,
    }
}

/// Kaiming normal init: weights ~ N(0, gain^2 / fan), paired bias all zeros.
pub fn kaiming_init<R: Rng>(
    shape: (usize, usize),
    mode: FanMode,
    gain_activation: Activation,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (out_dim, in_dim) = shape;
    if out_dim == 0 || in_dim == 0 {
        return Err(Error::Invalid(format!(
            "kaiming_init: zero dimension in shape ({out_dim}, {in_dim})"
        )));
    }
    let fan = match mode {
        FanMode::FanIn => in_dim,
        FanMode::FanOut => out_dim,
    } as f64;
    let sigma = (gain_squared(gain_activation) / fan).sqrt();
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let data: Vec<f64> = (0..out_dim * in_dim).map(|_| normal.sample(rng)).collect();
    let w = Tensor::param(vec![out_dim, in_dim], data)?;
    let b = Tensor::param(vec![out_dim], vec![0.0; out_dim])?;
    Ok((w, b))
}

/// Apply an activation to a tensor (re-exported convenience).
pub fn activation_apply(kind: Activation, x: &Tensor) -> Tensor {
    activation(x, kind)
}

/// Names and shapes of every weight and bias tensor of an MLP, in layer
/// order: `L{k}.W` of shape `(out, in)` and `L{k}.b` of shape `(out,)`.
pub fn param_spec_of(arch: &[LayerSpec]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::with_capacity(arch.len() * 2);
    for (k, spec) in arch.iter().enumerate() {
        out.push((format!("L{k}.W"), vec![spec.out_dim, spec.in_dim]));
        out.push((format!("L{k}.b"), vec![spec.out_dim]));
    }
    out
}

/// Initialize an MLP's parameters per `param_spec_of` naming. Weights are
/// Kaiming with the given fan mode and each layer's own activation gain;
/// biases are zero.
pub fn init_mlp_params<R: Rng>(
    arch: &[LayerSpec],
    mode: FanMode,
    role: Role,
    rng: &mut R,
) -> Result<ParamSet> {
    let mut params = ParamSet::new(role);
    for (k, spec) in arch.iter().enumerate() {
        let (w, b) = kaiming_init((spec.out_dim, spec.in_dim), mode, spec.activation, rng)?;
        params.insert(format!("L{k}.W"), w)?;
        params.insert(format!("L{k}.b"), b)?;
    }
    Ok(params)
}

fn layer_params<'a>(
    params: &'a ParamSet,
    k: usize,
    spec: &LayerSpec,
    x_cols: usize,
) -> Result<(&'a Tensor, &'a Tensor)> {
    let w = params.get(&format!("L{k}.W")).ok_or(Error::Layer {
        layer: k,
        message: format!("missing parameter L{k}.W"),
    })?;
    let b = params.get(&format!("L{k}.b")).ok_or(Error::Layer {
        layer: k,
        message: format!("missing parameter L{k}.b"),
    })?;
    if w.shape() != [spec.out_dim, spec.in_dim] {
        return Err(Error::Layer {
            layer: k,
            message: format!(
                "weight shape {:?} does not match spec ({}, {})",
                w.shape(),
                spec.out_dim,
                spec.in_dim
            ),
        });
    }
    if x_cols != spec.in_dim {
        return Err(Error::Layer {
            layer: k,
            message: format!("input width {} does not match in_dim {}", x_cols, spec.in_dim),
        });
    }
    Ok((w, b))
}

/// Forward pass through the layer chain. The hook runs on every
/// pre-activation except the final layer's (normalization insertion point).
pub fn mlp_forward_hook(
    params: &ParamSet,
    specs: &[LayerSpec],
    x: &Tensor,
    hook: &mut dyn FnMut(usize, Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut h = x.clone();
    for (k, spec) in specs.iter().enumerate() {
        let cols = *h.shape().last().unwrap_or(&0);
        let (w, b) = layer_params(params, k, spec, cols)?;
        let mut z = add_bias(&matmul_nt(&h, w)?, b)?;
        if k + 1 < specs.len() {
            z = hook(k, z)?;
        }
        h = activation(&z, spec.activation);
    }
    Ok(h)
}

/// Plain functional forward pass: `x[batch, d]` through the layer chain.
pub fn mlp_forward(params: &ParamSet, specs: &[LayerSpec], x: &Tensor) -> Result<Tensor> {
    mlp_forward_hook(params, specs, x, &mut |_, z| Ok(z))
}

/// Forward pass that also returns each layer's post-activation output,
/// for activation-statistics diagnostics.
pub fn mlp_forward_layers(
    params: &ParamSet,
    specs: &[LayerSpec],
    x: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut outs = Vec::with_capacity(specs.len());
    let mut h = x.clone();
    for (k, spec) in specs.iter().enumerate() {
        let cols = *h.shape().last().unwrap_or(&0);
        let (w, b) = layer_params(params, k, spec, cols)?;
        let z = add_bias(&matmul_nt(&h, w)?, b)?;
        h = activation(&z, spec.activation);
        outs.push(h.clone());
    }
    Ok(outs)
}
