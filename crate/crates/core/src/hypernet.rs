//! Hypernetwork parametrizations: the default formulation, the
//! non-proportional additive (NPA) scheme, and the two single-component
//! ablations.
//!
//! A hypernetwork maps a low-dimensional conditioning input gamma to the
//! full parameter set of a primary network. The default formulation feeds
//! gamma straight into a zero-bias trunk, which makes every prediction
//! exactly proportional to gamma at init. NPA breaks that in two places:
//! gamma is first mapped onto the unit circle (constant-norm input), and the
//! trunk/head output is treated as an additive delta on a directly learned,
//! gamma-independent parameter set theta0.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{
    init_mlp_params, kaiming_init, param_spec_of, FanMode, LayerSpec, ParamSet, Role,
};
use crate::tensor::{
    activation, add, add_bias, layer_norm, matmul_nt, mul_bias, reshape,
    weight_norm_apply, Activation, Tensor,
};

/// Declared range of the conditioning input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaRange {
    ZeroOne,
    SymmetricOne,
}

impl GammaRange {
    pub fn contains(self, v: f64) -> bool {
        match self {
            GammaRange::ZeroOne => (0.0..=1.0).contains(&v),
            GammaRange::SymmetricOne => (-1.0..=1.0).contains(&v),
        }
    }
}

/// One conditioning input: a vector of floats within a declared range.
#[derive(Debug, Clone)]
pub struct GammaSample {
    pub values: Vec<f64>,
    pub range: GammaRange,
}

impl GammaSample {
    pub fn new(values: Vec<f64>, range: GammaRange) -> Result<GammaSample> {
        if values.is_empty() {
            return Err(Error::Invalid("gamma must have at least one dimension".into()));
        }
        if let Some(&bad) = values.iter().find(|&&v| !range.contains(v)) {
            return Err(Error::Invalid(format!(
                "gamma component {bad} outside declared range {range:?}"
            )));
        }
        Ok(GammaSample { values, range })
    }

    pub fn scalar(v: f64) -> GammaSample {
        let range = if v < 0.0 {
            GammaRange::SymmetricOne
        } else {
            GammaRange::ZeroOne
        };
        GammaSample {
            values: vec![v],
            range,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Per-dimension map onto the unit circle: dimension i contributes the pair
/// `(cos(g_i * pi/2), sin(g_i * pi/2))`, so each pair has squared norm 1 and
/// the full vector has constant norm sqrt(d) for every gamma.
pub fn encode_l2(gamma: &GammaSample) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * gamma.values.len());
    for &g in &gamma.values {
        let t = g * std::f64::consts::FRAC_PI_2;
        out.push(t.cos());
        out.push(t.sin());
    }
    out
}

/// Gamma sampling strategies used by the training loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaStrategy {
    Uniform01,
    /// sigmoid(z) with z ~ N(0,1); components in (0,1).
    GaussianSigmoid,
    UniformRange(f64, f64),
}

pub fn sample_gamma<R: Rng>(
    strategy: GammaStrategy,
    d: usize,
    rng: &mut R,
) -> Result<GammaSample> {
    if d == 0 {
        return Err(Error::Invalid("gamma dimension must be >= 1".into()));
    }
    match strategy {
        GammaStrategy::Uniform01 => {
            let values = (0..d).map(|_| rng.gen::<f64>()).collect();
            GammaSample::new(values, GammaRange::ZeroOne)
        }
        GammaStrategy::GaussianSigmoid => {
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            let values = (0..d)
                .map(|_| crate::tensor::sigmoid(normal.sample(rng)))
                .collect();
            GammaSample::new(values, GammaRange::ZeroOne)
        }
        GammaStrategy::UniformRange(lo, hi) => {
            if lo >= hi {
                return Err(Error::Invalid(format!(
                    "uniform_range requires lo < hi, got [{lo}, {hi}]"
                )));
            }
            let values = (0..d).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
            let range = if lo >= 0.0 {
                GammaRange::ZeroOne
            } else {
                GammaRange::SymmetricOne
            };
            GammaSample::new(values, range)
        }
    }
}

/// Output parametrization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parametrization {
    /// theta = heads(trunk(gamma))
    Default,
    /// theta = theta0 + heads(trunk(encode_l2(gamma)))
    Npa,
    /// theta = heads(trunk(encode_l2(gamma)))
    InputOnly,
    /// theta = theta0 + heads(trunk(gamma))
    OutputOnly,
}

impl Parametrization {
    pub fn uses_encoding(self) -> bool {
        matches!(self, Parametrization::Npa | Parametrization::InputOnly)
    }

    pub fn uses_theta0(self) -> bool {
        matches!(self, Parametrization::Npa | Parametrization::OutputOnly)
    }
}

/// Layer normalization applied inside the trunk (the LayerNorm-H baseline).
#[derive(Debug, Clone, Copy)]
pub struct TrunkLayerNorm {
    pub eps: f64,
    /// When set, per-site scale/shift live in omega as `LN{k}.g` / `LN{k}.b`.
    pub affine: bool,
}

/// A hypernetwork: shared trunk, one linear head per primary target tensor,
/// and (in additive modes) a directly learned theta0.
pub struct HypernetModel {
    pub mode: Parametrization,
    pub input_dim: usize,
    pub trunk_specs: Vec<LayerSpec>,
    /// Primary target tensors: (name, shape) per `param_spec_of`.
    pub targets: Vec<(String, Vec<usize>)>,
    pub omega: ParamSet,
    pub theta0: Option<ParamSet>,
    /// theta0 folded into the head biases (additive modes only).
    pub folded: bool,
    pub trunk_norm: Option<TrunkLayerNorm>,
    /// Per-target weight-norm gains (`WN.{name}.g` in omega) when attached.
    pub weight_norm: bool,
}

impl HypernetModel {
    pub fn trunk_input_width(&self) -> usize {
        if self.mode.uses_encoding() {
            2 * self.input_dim
        } else {
            self.input_dim
        }
    }
}

/// Build and initialize a hypernetwork.
///
/// Trunk: hidden widths from `trunk_widths` with `trunk_activation`, Kaiming
/// fan-out, zero biases. Heads: one linear layer per target, initialized
/// independently from its own (trunk width, target size) dimensions. In
/// additive modes theta0 is initialized exactly as a standalone primary
/// network would be.
pub fn hypernet_init<R: Rng>(
    primary_arch: &[LayerSpec],
    trunk_widths: &[usize],
    trunk_activation: Activation,
    mode: Parametrization,
    input_dim: usize,
    rng: &mut R,
) -> Result<HypernetModel> {
    if trunk_widths.is_empty() {
        return Err(Error::Invalid("trunk_widths must be nonempty".into()));
    }
    if input_dim == 0 {
        return Err(Error::Invalid("input_dim must be >= 1".into()));
    }
    let in_width = if mode.uses_encoding() {
        2 * input_dim
    } else {
        input_dim
    };

    let mut trunk_specs = Vec::with_capacity(trunk_widths.len());
    let mut prev = in_width;
    for &w in trunk_widths {
        trunk_specs.push(LayerSpec::new(prev, w, trunk_activation));
        prev = w;
    }

    let mut omega = ParamSet::new(Role::HypernetOmega);
    for (k, spec) in trunk_specs.iter().enumerate() {
        let (w, b) = kaiming_init(
            (spec.out_dim, spec.in_dim),
            FanMode::FanOut,
            trunk_activation,
            rng,
        )?;
        omega.insert(format!("T{k}.W"), w)?;
        omega.insert(format!("T{k}.b"), b)?;
    }

    let targets = param_spec_of(primary_arch);
    let trunk_out = *trunk_widths.last().unwrap();
    for (name, shape) in &targets {
        let numel: usize = shape.iter().product();
        let (w, b) = kaiming_init((numel, trunk_out), FanMode::FanOut, Activation::Linear, rng)?;
        omega.insert(format!("H.{name}.W"), w)?;
        omega.insert(format!("H.{name}.b"), b)?;
    }

    let theta0 = if mode.uses_theta0() {
        Some(init_mlp_params(
            primary_arch,
            FanMode::FanIn,
            Role::IndependentTheta0,
            rng,
        )?)
    } else {
        None
    };

    Ok(HypernetModel {
        mode,
        input_dim,
        trunk_specs,
        targets,
        omega,
        theta0,
        folded: false,
        trunk_norm: None,
        weight_norm: false,
    })
}

fn trunk_forward(model: &HypernetModel, input: Vec<f64>) -> Result<Tensor> {
    let width = input.len();
    if width != model.trunk_input_width() {
        return Err(Error::Invalid(format!(
            "trunk input width {width} does not match expected {}",
            model.trunk_input_width()
        )));
    }
    let mut h = Tensor::new(vec![1, width], input)?;
    for (k, spec) in model.trunk_specs.iter().enumerate() {
        let w = model
            .omega
            .get(&format!("T{k}.W"))
            .ok_or_else(|| Error::Invalid(format!("missing trunk parameter T{k}.W")))?;
        let b = model
            .omega
            .get(&format!("T{k}.b"))
            .ok_or_else(|| Error::Invalid(format!("missing trunk parameter T{k}.b")))?;
        let mut z = add_bias(&matmul_nt(&h, w)?, b)?;
        if let Some(norm) = model.trunk_norm {
            z = layer_norm(&z, norm.eps)?;
            if norm.affine {
                let g = model
                    .omega
                    .get(&format!("LN{k}.g"))
                    .ok_or_else(|| Error::Invalid(format!("missing LN{k}.g")))?;
                let beta = model
                    .omega
                    .get(&format!("LN{k}.b"))
                    .ok_or_else(|| Error::Invalid(format!("missing LN{k}.b")))?;
                z = add_bias(&mul_bias(&z, g)?, beta)?;
            }
        }
        h = activation(&z, spec.activation);
    }
    Ok(h)
}

/// Predict the full primary parameter set for one gamma. The returned
/// tensors stay on the differentiation path of omega (and theta0 when
/// present and unfolded).
pub fn predict_params(model: &HypernetModel, gamma: &GammaSample) -> Result<ParamSet> {
    if gamma.dim() != model.input_dim {
        return Err(Error::Invalid(format!(
            "gamma dimension {} does not match model input_dim {}",
            gamma.dim(),
            model.input_dim
        )));
    }
    let input = if model.mode.uses_encoding() {
        encode_l2(gamma)
    } else {
        gamma.values.clone()
    };
    let feat = trunk_forward(model, input)?;

    let mut theta = ParamSet::new(Role::PrimaryTheta);
    for (name, shape) in &model.targets {
        let w = model
            .omega
            .get(&format!("H.{name}.W"))
            .ok_or_else(|| Error::Invalid(format!("missing head parameter H.{name}.W")))?;
        let b = model
            .omega
            .get(&format!("H.{name}.b"))
            .ok_or_else(|| Error::Invalid(format!("missing head parameter H.{name}.b")))?;
        let flat = add_bias(&matmul_nt(&feat, w)?, b)?;
        let mut t = reshape(&flat, shape.clone())?;
        if model.weight_norm {
            let g = model
                .omega
                .get(&format!("WN.{name}.g"))
                .ok_or_else(|| Error::Invalid(format!("missing weight-norm gain WN.{name}.g")))?;
            t = weight_norm_apply(&t, g)?;
        }
        if let (Some(theta0), false) = (&model.theta0, model.folded) {
            let base = theta0
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("missing theta0 entry {name}")))?;
            t = add(&t, base)?;
        }
        theta.insert(name.clone(), t)?;
    }
    Ok(theta)
}

/// Implement theta0 as the initialization of each head's bias.
///
/// Returns a model with independent parameter tensors whose head biases
/// carry theta0 and whose separate theta0 set is dropped. Predictions and
/// loss gradients are unchanged: the bias and theta0 sit on the same adjoint
/// path.
pub fn fold_theta0_into_bias(model: &HypernetModel) -> Result<HypernetModel> {
    let theta0 = model.theta0.as_ref().ok_or_else(|| {
        Error::Invalid(format!(
            "fold_theta0_into_bias requires an additive mode with theta0 present (mode {:?}, folded {})",
            model.mode, model.folded
        ))
    })?;

    let mut omega = ParamSet::new(Role::HypernetOmega);
    for (name, t) in model.omega.iter() {
        let tensor = if let Some(target) = name
            .strip_prefix("H.")
            .and_then(|rest| rest.strip_suffix(".b"))
        {
            let base = theta0
                .get(target)
                .ok_or_else(|| Error::Invalid(format!("missing theta0 entry {target}")))?;
            let data: Vec<f64> = t
                .data()
                .iter()
                .zip(base.data().iter())
                .map(|(b, t0)| b + t0)
                .collect();
            Tensor::param(t.shape().to_vec(), data)?
        } else {
            Tensor::param(t.shape().to_vec(), t.to_vec())?
        };
        omega.insert(name, tensor)?;
    }

    Ok(HypernetModel {
        mode: model.mode,
        input_dim: model.input_dim,
        trunk_specs: model.trunk_specs.clone(),
        targets: model.targets.clone(),
        omega,
        theta0: None,
        folded: true,
        trunk_norm: model.trunk_norm,
        weight_norm: model.weight_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::population_stdev;

    fn tiny_primary() -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(6, 8, Activation::Relu),
            LayerSpec::new(8, 3, Activation::Linear),
        ]
    }

    #[test]
    fn encode_endpoints() {
        let e0 = encode_l2(&GammaSample::scalar(0.0));
        assert_eq!(e0, vec![1.0, 0.0]);
        let e1 = encode_l2(&GammaSample::scalar(1.0));
        assert!(e1[0].abs() < 1e-15 && (e1[1] - 1.0).abs() < 1e-15);
        let eh = encode_l2(&GammaSample::scalar(0.5));
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((eh[0] - r).abs() < 1e-12 && (eh[1] - r).abs() < 1e-12);
    }

    #[test]
    fn encode_constant_norm() {
        let mut rng = stream_rng(11, "encode-test");
        for d in [1usize, 3, 32] {
            let g = sample_gamma(GammaStrategy::Uniform01, d, &mut rng).unwrap();
            let e = encode_l2(&g);
            let ss: f64 = e.iter().map(|x| x * x).sum();
            assert!((ss - d as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn init_shapes_default_and_npa() {
        let mut rng = stream_rng(5, "init-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[16, 128],
            Activation::LeakyRelu(0.01),
            Parametrization::Default,
            1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.trunk_input_width(), 1);
        assert_eq!(m.omega.get("T0.W").unwrap().shape(), &[16, 1]);
        assert_eq!(m.omega.get("T1.W").unwrap().shape(), &[128, 16]);
        assert!(m.theta0.is_none());

        let m2 = hypernet_init(
            &tiny_primary(),
            &[16, 128],
            Activation::LeakyRelu(0.01),
            Parametrization::Npa,
            1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(m2.trunk_input_width(), 2);
        assert_eq!(m2.omega.get("T0.W").unwrap().shape(), &[16, 2]);
        assert!(m2.theta0.is_some());
        // head for L0.W of shape (8, 6): weight shape (48, 128)
        assert_eq!(m2.omega.get("H.L0.W.W").unwrap().shape(), &[48, 128]);
    }

    #[test]
    fn default_predictions_are_homogeneous_at_init() {
        let mut rng = stream_rng(6, "homog-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[16, 32],
            Activation::LeakyRelu(0.01),
            Parametrization::Default,
            1,
            &mut rng,
        )
        .unwrap();
        let gamma = 0.4;
        let alpha = 2.0;
        let t1 = predict_params(&m, &GammaSample::scalar(gamma)).unwrap();
        let t2 = predict_params(&m, &GammaSample::scalar(alpha * gamma)).unwrap();
        for ((_, a), (_, b)) in t1.iter().zip(t2.iter()) {
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                let rel = (alpha * x - y).abs() / (x.abs() * alpha + y.abs() + 1e-300);
                assert!(rel < 1e-12, "{x} {y}");
            }
        }
    }

    #[test]
    fn npa_with_zero_omega_reduces_to_theta0() {
        let mut rng = stream_rng(7, "npa-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[8, 16],
            Activation::LeakyRelu(0.01),
            Parametrization::Npa,
            1,
            &mut rng,
        )
        .unwrap();
        for (_, t) in m.omega.iter() {
            t.set_data(vec![0.0; t.numel()]).unwrap();
        }
        let theta = predict_params(&m, &GammaSample::scalar(0.3)).unwrap();
        let theta0 = m.theta0.as_ref().unwrap();
        for (name, t) in theta.iter() {
            assert_eq!(*t.data(), *theta0.get(name).unwrap().data());
        }
    }

    #[test]
    fn npa_sweep_is_flat_default_is_linear() {
        let mut rng = stream_rng(8, "sweep-test");
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();

        let dflt = hypernet_init(
            &tiny_primary(),
            &[16, 32],
            Activation::LeakyRelu(0.01),
            Parametrization::Default,
            1,
            &mut rng,
        )
        .unwrap();
        let stds: Vec<f64> = grid
            .iter()
            .map(|&g| {
                let theta = predict_params(&dflt, &GammaSample::scalar(g)).unwrap();
                population_stdev(&theta.flat_values())
            })
            .collect();
        // stdev(theta(gamma)) = gamma * stdev(theta(1)), so max/min = 10 exactly
        let ratio = stds.last().unwrap() / stds.first().unwrap();
        assert!((ratio - 10.0).abs() < 1e-9, "ratio {ratio}");

        let npa = hypernet_init(
            &tiny_primary(),
            &[16, 32],
            Activation::LeakyRelu(0.01),
            Parametrization::Npa,
            1,
            &mut rng,
        )
        .unwrap();
        let stds: Vec<f64> = grid
            .iter()
            .map(|&g| {
                let theta = predict_params(&npa, &GammaSample::scalar(g)).unwrap();
                population_stdev(&theta.flat_values())
            })
            .collect();
        let max = stds.iter().cloned().fold(f64::MIN, f64::max);
        let min = stds.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 2.0, "ratio {}", max / min);
    }

    #[test]
    fn fold_preserves_predictions_bit_exactly() {
        let mut rng = stream_rng(9, "fold-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[8, 16],
            Activation::LeakyRelu(0.01),
            Parametrization::Npa,
            1,
            &mut rng,
        )
        .unwrap();
        let folded = fold_theta0_into_bias(&m).unwrap();
        for g in [0.0, 0.17, 0.5, 0.93, 1.0] {
            let a = predict_params(&m, &GammaSample::scalar(g)).unwrap();
            let b = predict_params(&folded, &GammaSample::scalar(g)).unwrap();
            for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
                let xd = x.data();
                let yd = y.data();
                for (u, v) in xd.iter().zip(yd.iter()) {
                    assert_eq!(u.to_bits(), v.to_bits());
                }
            }
        }
        // folding twice errors
        assert!(fold_theta0_into_bias(&folded).is_err());
    }

    #[test]
    fn fold_rejects_default_mode() {
        let mut rng = stream_rng(10, "fold-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[8],
            Activation::LeakyRelu(0.01),
            Parametrization::Default,
            1,
            &mut rng,
        )
        .unwrap();
        assert!(fold_theta0_into_bias(&m).is_err());
    }

    #[test]
    fn folded_npa_matches_default_parameter_count() {
        let mut rng = stream_rng(12, "count-test");
        let dflt = hypernet_init(
            &tiny_primary(),
            &[16, 32],
            Activation::LeakyRelu(0.01),
            Parametrization::Default,
            1,
            &mut rng,
        )
        .unwrap();
        let npa = hypernet_init(
            &tiny_primary(),
            &[16, 32],
            Activation::LeakyRelu(0.01),
            Parametrization::Npa,
            1,
            &mut rng,
        )
        .unwrap();
        let folded = fold_theta0_into_bias(&npa).unwrap();
        // Same trainable count except the doubled first trunk layer fan-in.
        let first_extra = 16; // (16, 2) vs (16, 1)
        assert_eq!(
            folded.omega.total_scalars(),
            dflt.omega.total_scalars() + first_extra
        );
    }

    #[test]
    fn sampling_strategies() {
        let mut rng = stream_rng(13, "sample-test");
        let g = sample_gamma(GammaStrategy::Uniform01, 32, &mut rng).unwrap();
        assert!(g.values.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let g = sample_gamma(GammaStrategy::GaussianSigmoid, 16, &mut rng).unwrap();
        assert!(g.values.iter().all(|&v| v > 0.0 && v < 1.0));

        assert!(sample_gamma(GammaStrategy::UniformRange(0.5, 0.4), 1, &mut rng).is_err());

        let mut r1 = stream_rng(99, "sample-test");
        let mut r2 = stream_rng(99, "sample-test");
        let a = sample_gamma(GammaStrategy::Uniform01, 8, &mut r1).unwrap();
        let b = sample_gamma(GammaStrategy::Uniform01, 8, &mut r2).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn negative_gamma_homogeneity_uses_separate_constants() {
        let mut rng = stream_rng(14, "neg-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[8, 16],
            Activation::LeakyRelu(0.01),
            Parametrization::Default,
            1,
            &mut rng,
        )
        .unwrap();
        let sample = |v: f64| GammaSample::new(vec![v], GammaRange::SymmetricOne).unwrap();
        let at = |v: f64| {
            predict_params(&m, &sample(v))
                .unwrap()
                .flat_values()
        };
        let pos1 = at(1.0);
        let neg1 = at(-1.0);
        for g in [0.3, 0.8] {
            for (got, base) in at(g).iter().zip(&pos1) {
                let want = g * base;
                assert!((got - want).abs() <= 1e-12 * (got.abs() + want.abs() + 1e-300));
            }
            for (got, base) in at(-g).iter().zip(&neg1) {
                let want = g * base;
                assert!((got - want).abs() <= 1e-12 * (got.abs() + want.abs() + 1e-300));
            }
        }
    }
}
