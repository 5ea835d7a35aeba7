//! Normalization baselines compared against the additive parametrization:
//! batch norm in the primary, layer norm in the primary or in the
//! hypernetwork trunk, and weight normalization of the predicted tensors.

use crate::error::{Error, Result};
use crate::hypernet::{predict_params, GammaSample, HypernetModel, TrunkLayerNorm};
use crate::layers::{LayerSpec, ParamSet};
use crate::tensor::{batch_norm_with_stats, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Which normalization strategy to attach, and where it lands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    /// Batch normalization after each hidden linear layer of the primary.
    BatchNormP,
    /// Layer normalization after each hidden linear layer of the primary.
    LayerNormP,
    /// Layer normalization after each trunk linear layer of the hypernetwork.
    LayerNormH,
    /// Weight normalization of each predicted parameter tensor.
    WeightNorm,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVariant {
    pub kind: NormKind,
    pub epsilon: f64,
    pub affine: bool,
}

impl NormVariant {
    pub fn new(kind: NormKind) -> Self {
        NormVariant {
            kind,
            epsilon: DEFAULT_EPS,
            affine: false,
        }
    }
}

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize, eps: f64, momentum: f64) -> Self {
        BatchNormState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum,
            eps,
        }
    }
}

/// Batch normalization over the batch dimension of `x[batch, d]`.
///
/// Training mode normalizes with batch statistics (population convention)
/// and updates the running stats in place; eval mode normalizes with the
/// running stats. Affine scale/shift, when wanted, are applied by the
/// caller with `mul_bias`/`add_bias` so they stay ordinary trained tensors.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState, training: bool) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (batch, d) = match shape[..] {
        [b, d] => (b, d),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![],
            })
        }
    };
    if d != state.running_mean.len() {
        return Err(Error::Invalid(format!(
            "batch_norm state has {} features, input has {d}",
            state.running_mean.len()
        )));
    }
    if training {
        if batch < 2 {
            return Err(Error::Invalid(format!(
                "batch_norm training requires batch >= 2, got {batch}"
            )));
        }
        let xd = x.data();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for j in 0..d {
            let mut mu = 0.0;
            for i in 0..batch {
                mu += xd[i * d + j];
            }
            mu /= batch as f64;
            let mut v = 0.0;
            for i in 0..batch {
                let c = xd[i * d + j] - mu;
                v += c * c;
            }
            v /= batch as f64;
            mean[j] = mu;
            var[j] = v;
        }
        drop(xd);
        let m = state.momentum;
        for j in 0..d {
            state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean[j];
            state.running_var[j] = (1.0 - m) * state.running_var[j] + m * var[j];
        }
        batch_norm_with_stats(x, mean, var, state.eps, true)
    } else {
        batch_norm_with_stats(
            x,
            state.running_mean.clone(),
            state.running_var.clone(),
            state.eps,
            false,
        )
    }
}

/// Per-row layer normalization (re-export of the graph op).
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    crate::tensor::layer_norm(x, eps)
}

/// Reparametrize every entry of a predicted set as `g * v / ||v||` with the
/// provided per-tensor gains (`WN.{name}.g`).
pub fn weight_norm(theta: &ParamSet, gains: &ParamSet) -> Result<ParamSet> {
    let mut out = ParamSet::new(theta.role);
    for (name, v) in theta.iter() {
        let g = gains
            .get(&format!("WN.{name}.g"))
            .ok_or_else(|| Error::Invalid(format!("missing weight-norm gain for {name}")))?;
        out.insert(name, crate::tensor::weight_norm_apply(v, g)?)?;
    }
    Ok(out)
}

/// Everything `attach_norm` adds to a run: site count plus any mutable
/// normalization state and affine parameters for the primary network.
pub struct NormAttachment {
    pub variant: NormVariant,
    pub sites: usize,
    /// One running-stats slot per primary hidden layer (BatchNormP only).
    pub bn_states: Vec<BatchNormState>,
    /// Affine scale/shift for primary-side normalization, trained directly.
    pub affine: Option<ParamSet>,
}

/// Attach a normalization strategy to a model/architecture pair.
///
/// LayerNormH instruments the hypernetwork trunk (mutates `model`);
/// BatchNormP/LayerNormP return state for the primary's hidden layers;
/// WeightNorm registers one gain per predicted tensor, initialized to the
/// predicted tensor's norm at gamma = 0.5.
pub fn attach_norm(
    variant: NormVariant,
    model: &mut HypernetModel,
    primary_arch: &[LayerSpec],
) -> Result<NormAttachment> {
    if variant.epsilon <= 0.0 {
        return Err(Error::Invalid("normalization epsilon must be > 0".into()));
    }
    // Hidden layers of the primary: every layer except the last.
    let primary_hidden = primary_arch.len().saturating_sub(1);
    match variant.kind {
        NormKind::LayerNormH => {
            model.trunk_norm = Some(TrunkLayerNorm {
                eps: variant.epsilon,
                affine: variant.affine,
            });
            let sites = model.trunk_specs.len();
            if variant.affine {
                for (k, spec) in model.trunk_specs.clone().iter().enumerate() {
                    model.omega.insert(
                        format!("LN{k}.g"),
                        Tensor::param(vec![spec.out_dim], vec![1.0; spec.out_dim])?,
                    )?;
                    model.omega.insert(
                        format!("LN{k}.b"),
                        Tensor::param(vec![spec.out_dim], vec![0.0; spec.out_dim])?,
                    )?;
                }
            }
            Ok(NormAttachment {
                variant,
                sites,
                bn_states: Vec::new(),
                affine: None,
            })
        }
        NormKind::BatchNormP | NormKind::LayerNormP => {
            if primary_hidden == 0 {
                return Err(Error::Invalid(
                    "primary network has no hidden layers to normalize".into(),
                ));
            }
            let bn_states = if variant.kind == NormKind::BatchNormP {
                primary_arch[..primary_hidden]
                    .iter()
                    .map(|l| BatchNormState::new(l.out_dim, variant.epsilon, DEFAULT_BN_MOMENTUM))
                    .collect()
            } else {
                Vec::new()
            };
            let affine = if variant.affine {
                let mut set = ParamSet::new(crate::layers::Role::HypernetOmega);
                for (k, l) in primary_arch[..primary_hidden].iter().enumerate() {
                    set.insert(
                        format!("PN{k}.g"),
                        Tensor::param(vec![l.out_dim], vec![1.0; l.out_dim])?,
                    )?;
                    set.insert(
                        format!("PN{k}.b"),
                        Tensor::param(vec![l.out_dim], vec![0.0; l.out_dim])?,
                    )?;
                }
                Some(set)
            } else {
                None
            };
            Ok(NormAttachment {
                variant,
                sites: primary_hidden,
                bn_states,
                affine,
            })
        }
        NormKind::WeightNorm => {
            let reference = predict_params(model, &GammaSample::scalar(0.5))?;
            let mut sites = 0;
            for (name, t) in reference.iter() {
                let norm: f64 = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Invalid(format!(
                        "weight_norm: predicted tensor {name} has zero norm at init"
                    )));
                }
                model
                    .omega
                    .insert(format!("WN.{name}.g"), Tensor::param(vec![1], vec![norm])?)?;
                sites += 1;
            }
            model.weight_norm = true;
            Ok(NormAttachment {
                variant,
                sites,
                bn_states: Vec::new(),
                affine: None,
            })
        }
    }
}
