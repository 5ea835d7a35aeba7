//! Configuration-driven experiment runner: the two training loops
//! (classification and amortized denoising), seeded end to end, with
//! metrics persistence, checkpoints and sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{
    self, accuracy, gen_synthetic_denoise, load_idx, loss_task1, loss_task2, IdxDataset,
    SyntheticDenoise,
};
use crate::diagnostics::{fit_proportionality, weight_std_sweep, GradNormTrace};
use crate::error::{Error, Result};
use crate::hypernet::{
    fold_theta0_into_bias, hypernet_init, predict_params, sample_gamma, GammaSample,
    GammaStrategy, HypernetModel, Parametrization,
};
use crate::layers::{mlp_forward_hook, LayerSpec, ParamSet, Role};
use crate::norm::{attach_norm, batch_norm, NormAttachment, NormKind, NormVariant};
use crate::optim::{AdamW, Optimizer, SgdNesterov};
use crate::rng::{stream_rng, STREAM_DATA_ORDER, STREAM_GAMMA, STREAM_INIT};
use crate::tensor::{add, add_bias, backward, mul_bias, scale, Activation, Tensor};

/// Gamma values used for evaluation passes (fixed, so eval is deterministic).
pub const EVAL_GAMMAS: [f64; 3] = [0.25, 0.5, 0.75];

/// Flat, typed experiment configuration. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    pub mode: String,
    #[serde(default = "default_trunk_widths")]
    pub trunk_widths: Vec<usize>,
    #[serde(default = "default_trunk_activation")]
    pub trunk_activation: String,
    #[serde(default = "default_one")]
    pub input_dim: usize,
    #[serde(default = "default_gamma_strategy")]
    pub gamma_strategy: String,
    #[serde(default)]
    pub gamma_lo: Option<f64>,
    #[serde(default)]
    pub gamma_hi: Option<f64>,
    /// One gamma per example instead of one shared gamma per minibatch.
    #[serde(default)]
    pub gamma_per_example: bool,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Dataset cap (first N training examples).
    #[serde(default)]
    pub limit: Option<usize>,
    // mnist_bayes inputs
    #[serde(default)]
    pub mnist_images: Option<String>,
    #[serde(default)]
    pub mnist_labels: Option<String>,
    #[serde(default)]
    pub mnist_test_images: Option<String>,
    #[serde(default)]
    pub mnist_test_labels: Option<String>,
    // synthetic_denoise inputs
    #[serde(default = "default_synth_n")]
    pub synth_n: usize,
    #[serde(default = "default_synth_d")]
    pub synth_d: usize,
    #[serde(default = "default_synth_segments")]
    pub synth_segments: usize,
    #[serde(default = "default_synth_noise")]
    pub synth_noise_std: f64,
}

fn default_trunk_widths() -> Vec<usize> {
    vec![16, 128]
}
fn default_trunk_activation() -> String {
    "leaky_relu".into()
}
fn default_one() -> usize {
    1
}
fn default_gamma_strategy() -> String {
    "uniform01".into()
}
fn default_optimizer() -> String {
    "sgd_nesterov".into()
}
fn default_lr() -> f64 {
    3e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    64
}
fn default_output_dir() -> String {
    "runs/out".into()
}
fn default_synth_n() -> usize {
    2048
}
fn default_synth_d() -> usize {
    32
}
fn default_synth_segments() -> usize {
    4
}
fn default_synth_noise() -> f64 {
    0.1
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        parse_task(&self.task)?;
        parse_mode(&self.mode)?;
        parse_activation(&self.trunk_activation)?;
        self.gamma_strategy()?;
        parse_optimizer_kind(&self.optimizer)?;
        if self.epochs == 0 && false {
            // epochs = 0 is a legal edge case: init-only evaluation.
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.trunk_widths.is_empty() {
            return Err(Error::Config("trunk_widths must be nonempty".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn gamma_strategy(&self) -> Result<GammaStrategy> {
        match self.gamma_strategy.as_str() {
            "uniform01" => Ok(GammaStrategy::Uniform01),
            "gaussian_sigmoid" => Ok(GammaStrategy::GaussianSigmoid),
            "uniform_range" => {
                let lo = self.gamma_lo.ok_or_else(|| {
                    Error::Config("uniform_range requires gamma_lo".into())
                })?;
                let hi = self.gamma_hi.ok_or_else(|| {
                    Error::Config("uniform_range requires gamma_hi".into())
                })?;
                if lo >= hi {
                    return Err(Error::Config(format!(
                        "gamma range [{lo}, {hi}] requires lo < hi"
                    )));
                }
                Ok(GammaStrategy::UniformRange(lo, hi))
            }
            other => Err(Error::Config(format!("unknown gamma_strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    MnistBayes,
    SyntheticDenoise,
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "mnist_bayes" => Ok(Task::MnistBayes),
        "synthetic_denoise" => Ok(Task::SyntheticDenoise),
        other => Err(Error::Config(format!("unknown task `{other}`"))),
    }
}

/// A run mode: a parametrization, or a normalization baseline on top of the
/// default parametrization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunMode {
    Param(Parametrization),
    Norm(NormKind),
}

pub fn parse_mode(s: &str) -> Result<RunMode> {
    match s {
        "default" => Ok(RunMode::Param(Parametrization::Default)),
        "npa" => Ok(RunMode::Param(Parametrization::Npa)),
        "input_only" => Ok(RunMode::Param(Parametrization::InputOnly)),
        "output_only" => Ok(RunMode::Param(Parametrization::OutputOnly)),
        "batch_norm_p" => Ok(RunMode::Norm(NormKind::BatchNormP)),
        "layer_norm_p" => Ok(RunMode::Norm(NormKind::LayerNormP)),
        "layer_norm_h" => Ok(RunMode::Norm(NormKind::LayerNormH)),
        "weight_norm" => Ok(RunMode::Norm(NormKind::WeightNorm)),
        other => Err(Error::Config(format!("unknown mode `{other}`"))),
    }
}

pub fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "leaky_relu" => Ok(Activation::LeakyRelu(0.01)),
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "gelu" => Ok(Activation::Gelu),
        "silu" => Ok(Activation::Silu),
        "linear" => Ok(Activation::Linear),
        other => Err(Error::Config(format!("unknown activation `{other}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OptimizerKind {
    SgdNesterov,
    AdamW,
}

fn parse_optimizer_kind(s: &str) -> Result<OptimizerKind> {
    match s {
        "sgd_nesterov" => Ok(OptimizerKind::SgdNesterov),
        "adamw" => Ok(OptimizerKind::AdamW),
        other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
    }
}

/// One metrics row, written per evaluation event.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    /// accuracy for classification, denoise MSE for the synthetic task
    pub eval_metric: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_std: f64,
}

fn fmt_float(v: f64) -> String {
    // 17 significant digits, enough to round-trip any f64.
    format!("{v:.16e}")
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(
        "step,epoch,train_loss,eval_loss,eval_metric,grad_norm_mean,grad_norm_std\n",
    );
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            fmt_float(r.epoch),
            fmt_float(r.train_loss),
            fmt_float(r.eval_loss),
            fmt_float(r.eval_metric),
            fmt_float(r.grad_norm_mean),
            fmt_float(r.grad_norm_std),
        );
    }
    out
}

/// Outcome of a run, with paths to the persisted artifacts.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub diverged: bool,
    pub records: Vec<MetricsRecord>,
    pub best_eval_metric: f64,
    pub last_eval_metric: f64,
    pub grad_traces: Vec<GradNormTrace>,
    pub wall_seconds: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

struct TaskData {
    task: Task,
    mnist_train: Option<IdxDataset>,
    mnist_eval: Option<IdxDataset>,
    synth_train: Option<SyntheticDenoise>,
    synth_eval: Option<SyntheticDenoise>,
}

impl TaskData {
    fn train_len(&self) -> usize {
        match self.task {
            Task::MnistBayes => self.mnist_train.as_ref().unwrap().len(),
            Task::SyntheticDenoise => self.synth_train.as_ref().unwrap().len(),
        }
    }
}

fn load_task_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    match parse_task(&cfg.task)? {
        Task::MnistBayes => {
            let images = cfg.mnist_images.as_ref().ok_or_else(|| {
                Error::Config("mnist_bayes requires mnist_images".into())
            })?;
            let labels = cfg.mnist_labels.as_ref().ok_or_else(|| {
                Error::Config("mnist_bayes requires mnist_labels".into())
            })?;
            let full = load_idx(Path::new(images), Path::new(labels), cfg.limit)?;
            let (train, eval) = match (&cfg.mnist_test_images, &cfg.mnist_test_labels) {
                (Some(ti), Some(tl)) => {
                    let test_limit = cfg.limit.map(|l| (l / 4).max(1));
                    let mut test = load_idx(Path::new(ti), Path::new(tl), test_limit)?;
                    test.split = data::Split::Test;
                    (full, test)
                }
                _ => full.split_train_val(0.8)?,
            };
            Ok(TaskData {
                task: Task::MnistBayes,
                mnist_train: Some(train),
                mnist_eval: Some(eval),
                synth_train: None,
                synth_eval: None,
            })
        }
        Task::SyntheticDenoise => {
            let mut rng = stream_rng(cfg.seed, "synthetic-data");
            let train = gen_synthetic_denoise(
                cfg.synth_n,
                cfg.synth_d,
                cfg.synth_segments,
                cfg.synth_noise_std,
                &mut rng,
            )?;
            let eval = gen_synthetic_denoise(
                cfg.synth_n / 4,
                cfg.synth_d,
                cfg.synth_segments,
                cfg.synth_noise_std,
                &mut rng,
            )?;
            Ok(TaskData {
                task: Task::SyntheticDenoise,
                mnist_train: None,
                mnist_eval: None,
                synth_train: Some(train),
                synth_eval: Some(eval),
            })
        }
    }
}

/// Primary architecture for a task.
pub fn primary_arch_for(task: Task, feature_dim: usize) -> Vec<LayerSpec> {
    match task {
        Task::MnistBayes => vec![
            LayerSpec::new(feature_dim, 32, Activation::Relu),
            LayerSpec::new(32, 10, Activation::Linear),
        ],
        Task::SyntheticDenoise => vec![
            LayerSpec::new(feature_dim, 64, Activation::Relu),
            LayerSpec::new(64, feature_dim, Activation::Linear),
        ],
    }
}

/// A fully constructed, training-ready model: hypernetwork plus any
/// normalization attachment and the flat set of directly trained tensors.
pub struct RunModel {
    pub model: HypernetModel,
    pub primary_arch: Vec<LayerSpec>,
    pub attachment: Option<NormAttachment>,
    pub trainable: ParamSet,
}

pub fn build_model(cfg: &ExperimentConfig, feature_dim: usize) -> Result<RunModel> {
    let task = parse_task(&cfg.task)?;
    let mode = parse_mode(&cfg.mode)?;
    let trunk_act = parse_activation(&cfg.trunk_activation)?;
    let primary_arch = primary_arch_for(task, feature_dim);
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);

    let parametrization = match mode {
        RunMode::Param(p) => p,
        RunMode::Norm(_) => Parametrization::Default,
    };
    let mut model = hypernet_init(
        &primary_arch,
        &cfg.trunk_widths,
        trunk_act,
        parametrization,
        cfg.input_dim,
        &mut rng,
    )?;

    let attachment = if let RunMode::Norm(kind) = mode {
        Some(attach_norm(NormVariant::new(kind), &mut model, &primary_arch)?)
    } else {
        None
    };

    // Additive modes train theta0 through the folded head bias.
    if model.theta0.is_some() {
        model = fold_theta0_into_bias(&model)?;
    }

    let mut trainable = ParamSet::new(Role::HypernetOmega);
    for (name, t) in model.omega.iter() {
        trainable.insert(name, t.clone())?;
    }
    if let Some(att) = &attachment {
        if let Some(affine) = &att.affine {
            for (name, t) in affine.iter() {
                trainable.insert(name, t.clone())?;
            }
        }
    }

    Ok(RunModel {
        model,
        primary_arch,
        attachment,
        trainable,
    })
}

fn build_optimizer(cfg: &ExperimentConfig) -> Result<Optimizer> {
    Ok(match parse_optimizer_kind(&cfg.optimizer)? {
        OptimizerKind::SgdNesterov => Optimizer::Sgd(SgdNesterov::new(cfg.lr, cfg.momentum)),
        OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            cfg.weight_decay,
        )),
    })
}

/// Forward the primary network with the attachment's normalization (if any)
/// inserted after each hidden linear layer, before the activation.
fn primary_forward(
    run: &mut RunModel,
    theta: &ParamSet,
    x: &Tensor,
    training: bool,
) -> Result<Tensor> {
    let arch = run.primary_arch.clone();
    let kind = run.attachment.as_ref().map(|a| a.variant.kind);
    match kind {
        Some(NormKind::BatchNormP) => {
            let att = run.attachment.as_mut().unwrap();
            let eps = att.variant.eps_or_default();
            let _ = eps;
            let states = &mut att.bn_states;
            let affine = att.affine.clone();
            mlp_forward_hook(theta, &arch, x, &mut |k, z| {
                let mut z = batch_norm(&z, &mut states[k], training)?;
                if let Some(aff) = &affine {
                    let g = aff.get(&format!("PN{k}.g")).unwrap();
                    let b = aff.get(&format!("PN{k}.b")).unwrap();
                    z = add_bias(&mul_bias(&z, g)?, b)?;
                }
                Ok(z)
            })
        }
        Some(NormKind::LayerNormP) => {
            let att = run.attachment.as_ref().unwrap();
            let eps = att.variant.epsilon;
            let affine = att.affine.clone();
            mlp_forward_hook(theta, &arch, x, &mut |k, z| {
                let mut z = crate::tensor::layer_norm(&z, eps)?;
                if let Some(aff) = &affine {
                    let g = aff.get(&format!("PN{k}.g")).unwrap();
                    let b = aff.get(&format!("PN{k}.b")).unwrap();
                    z = add_bias(&mul_bias(&z, g)?, b)?;
                }
                Ok(z)
            })
        }
        _ => mlp_forward_hook(theta, &arch, x, &mut |_, z| Ok(z)),
    }
}

impl NormVariant {
    fn eps_or_default(&self) -> f64 {
        self.epsilon
    }
}

fn eval_pass(run: &mut RunModel, data: &TaskData) -> Result<(f64, f64)> {
    match data.task {
        Task::MnistBayes => {
            let ds = data.mnist_eval.as_ref().unwrap();
            let idx: Vec<usize> = (0..ds.len()).collect();
            let (x, labels) = ds.batch(&idx)?;
            let mut losses = Vec::new();
            let mut accs = Vec::new();
            for &g in &EVAL_GAMMAS {
                let gamma = gamma_of_dim(g, run.model.input_dim);
                let theta = predict_params(&run.model, &gamma)?;
                let logits = primary_forward(run, &theta, &x, false)?;
                losses.push(loss_task1(&logits, &labels)?.item());
                accs.push(accuracy(&logits, &labels)?);
            }
            let n = EVAL_GAMMAS.len() as f64;
            Ok((losses.iter().sum::<f64>() / n, accs.iter().sum::<f64>() / n))
        }
        Task::SyntheticDenoise => {
            let ds = data.synth_eval.as_ref().unwrap();
            let idx: Vec<usize> = (0..ds.len()).collect();
            let (noisy, clean) = ds.batch(&idx)?;
            let mut losses = Vec::new();
            let mut mses = Vec::new();
            for &g in &EVAL_GAMMAS {
                let gamma = gamma_of_dim(g, run.model.input_dim);
                let theta = predict_params(&run.model, &gamma)?;
                let pred = primary_forward(run, &theta, &noisy, false)?;
                losses.push(loss_task2(&pred, &clean, g)?.item());
                mses.push(data::mse(&pred, &clean)?.item());
            }
            let n = EVAL_GAMMAS.len() as f64;
            Ok((losses.iter().sum::<f64>() / n, mses.iter().sum::<f64>() / n))
        }
    }
}

/// Broadcast a scalar eval gamma to the model's input dimensionality.
fn gamma_of_dim(g: f64, d: usize) -> GammaSample {
    GammaSample {
        values: vec![g; d],
        range: crate::hypernet::GammaRange::ZeroOne,
    }
}

fn shuffled_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates, driven by the data-order stream only.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Gradient norm over the predicted-parameter tensors (the adjoint captured
/// at the theta node, not at omega).
fn theta_grad_norm(theta: &ParamSet) -> f64 {
    let mut ss = 0.0;
    for (_, t) in theta.iter() {
        if let Some(g) = t.grad() {
            ss += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    ss.sqrt()
}

/// One training step on one minibatch. Returns (loss, theta grad norm).
fn train_step(
    run: &mut RunModel,
    data: &TaskData,
    indices: &[usize],
    gamma_rng: &mut impl Rng,
    strategy: GammaStrategy,
    per_example: bool,
    optimizer: &mut Optimizer,
) -> Result<(f64, f64)> {
    run.trainable.zero_grads();
    let (loss, theta_sets) = match data.task {
        Task::MnistBayes => {
            let ds = data.mnist_train.as_ref().unwrap();
            if per_example {
                let mut total: Option<Tensor> = None;
                let mut sets = Vec::new();
                for &i in indices {
                    let gamma = sample_gamma(strategy, run.model.input_dim, gamma_rng)?;
                    let theta = predict_params(&run.model, &gamma)?;
                    for (_, t) in theta.iter() {
                        t.retain_grad();
                    }
                    let (x, labels) = ds.batch(&[i])?;
                    let logits = primary_forward(run, &theta, &x, true)?;
                    let l = scale(&loss_task1(&logits, &labels)?, 1.0 / indices.len() as f64);
                    total = Some(match total {
                        Some(t) => add(&t, &l)?,
                        None => l,
                    });
                    sets.push(theta);
                }
                (total.unwrap(), sets)
            } else {
                let gamma = sample_gamma(strategy, run.model.input_dim, gamma_rng)?;
                let theta = predict_params(&run.model, &gamma)?;
                for (_, t) in theta.iter() {
                    t.retain_grad();
                }
                let (x, labels) = ds.batch(indices)?;
                let logits = primary_forward(run, &theta, &x, true)?;
                (loss_task1(&logits, &labels)?, vec![theta])
            }
        }
        Task::SyntheticDenoise => {
            let ds = data.synth_train.as_ref().unwrap();
            let gamma = sample_gamma(strategy, run.model.input_dim, gamma_rng)?;
            let g0 = gamma.values[0];
            let theta = predict_params(&run.model, &gamma)?;
            for (_, t) in theta.iter() {
                t.retain_grad();
            }
            let (noisy, clean) = ds.batch(indices)?;
            let pred = primary_forward(run, &theta, &noisy, true)?;
            (loss_task2(&pred, &clean, g0)?, vec![theta])
        }
    };
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Ok((loss_value, f64::NAN));
    }
    backward(&loss)?;
    let gnorm: f64 = theta_sets.iter().map(|t| theta_grad_norm(t)).sum();
    optimizer.step(&run.trainable)?;
    Ok((loss_value, gnorm))
}

fn model_checkpoint(run: &RunModel, optimizer: &Optimizer, step: usize) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    for (name, t) in run.model.omega.iter() {
        ckpt.push(format!("omega.{name}"), t.shape().to_vec(), t.to_vec());
    }
    if let Some(att) = &run.attachment {
        if let Some(aff) = &att.affine {
            for (name, t) in aff.iter() {
                ckpt.push(format!("affine.{name}"), t.shape().to_vec(), t.to_vec());
            }
        }
        for (k, st) in att.bn_states.iter().enumerate() {
            ckpt.push(
                format!("bn.{k}.mean"),
                vec![st.running_mean.len()],
                st.running_mean.clone(),
            );
            ckpt.push(
                format!("bn.{k}.var"),
                vec![st.running_var.len()],
                st.running_var.clone(),
            );
        }
    }
    for (name, data) in optimizer.state_arrays() {
        let len = data.len();
        ckpt.push(format!("opt.{name}"), vec![len], data);
    }
    ckpt.push("run.step", vec![1], vec![step as f64]);
    ckpt
}

/// Restore model and optimizer state from a checkpoint, validating shapes.
pub fn restore_from_checkpoint(
    run: &mut RunModel,
    optimizer: &mut Optimizer,
    ckpt: &Checkpoint,
) -> Result<usize> {
    for (name, t) in run.model.omega.iter() {
        let key = format!("omega.{name}");
        let (shape, data) = ckpt
            .get(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint missing entry {key}")))?;
        if shape != t.shape() {
            return Err(Error::Format(format!(
                "checkpoint entry {key}: shape {:?} does not match model shape {:?}",
                shape,
                t.shape()
            )));
        }
        t.set_data(data.to_vec())?;
    }
    if let Some(att) = &mut run.attachment {
        if let Some(aff) = &att.affine {
            for (name, t) in aff.iter() {
                let key = format!("affine.{name}");
                if let Some((_, data)) = ckpt.get(&key) {
                    t.set_data(data.to_vec())?;
                }
            }
        }
        for (k, st) in att.bn_states.iter_mut().enumerate() {
            if let Some((_, data)) = ckpt.get(&format!("bn.{k}.mean")) {
                st.running_mean = data.to_vec();
            }
            if let Some((_, data)) = ckpt.get(&format!("bn.{k}.var")) {
                st.running_var = data.to_vec();
            }
        }
    }
    let opt_arrays: Vec<(String, Vec<f64>)> = ckpt
        .entries
        .iter()
        .filter_map(|(n, _, d)| {
            n.strip_prefix("opt.").map(|rest| (rest.to_string(), d.clone()))
        })
        .collect();
    optimizer.restore_state(&opt_arrays);
    let step = ckpt
        .get("run.step")
        .map(|(_, d)| d[0] as usize)
        .unwrap_or(0);
    Ok(step)
}

/// Run one experiment end to end, writing metrics.csv, gradnorms.csv,
/// summary.txt and final.hpnc into `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let out_dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;

    let data = load_task_data(cfg)?;
    let feature_dim = match data.task {
        Task::MnistBayes => data.mnist_train.as_ref().unwrap().feature_dim(),
        Task::SyntheticDenoise => data.synth_train.as_ref().unwrap().dim(),
    };
    let mut run = build_model(cfg, feature_dim)?;
    let mut optimizer = build_optimizer(cfg)?;
    let strategy = cfg.gamma_strategy()?;

    let mut order_rng = stream_rng(cfg.seed, STREAM_DATA_ORDER);
    let mut gamma_rng = stream_rng(cfg.seed, STREAM_GAMMA);

    let n = data.train_len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    // Evaluation points: init, then every quarter epoch.
    let eval_every = (steps_per_epoch / 4).max(1);

    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut grad_traces: Vec<GradNormTrace> = Vec::new();
    let mut diverged = false;
    let mut step = 0usize;

    // Init-only evaluation (also the epochs = 0 edge case).
    {
        let (eval_loss, eval_metric) = eval_pass(&mut run, &data)?;
        records.push(MetricsRecord {
            step: 0,
            epoch: 0.0,
            train_loss: eval_loss,
            eval_loss,
            eval_metric,
            grad_norm_mean: 0.0,
            grad_norm_std: 0.0,
        });
    }

    let mut window_losses: Vec<f64> = Vec::new();
    let mut window_norms: Vec<f64> = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        let order = shuffled_indices(n, &mut order_rng);
        let mut epoch_norms: Vec<f64> = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, gnorm) = train_step(
                &mut run,
                &data,
                chunk,
                &mut gamma_rng,
                strategy,
                cfg.gamma_per_example,
                &mut optimizer,
            )?;
            step += 1;
            if !loss.is_finite() {
                diverged = true;
                grad_traces.push(GradNormTrace::summarize(epoch, epoch_norms.clone()));
                break 'epochs;
            }
            window_losses.push(loss);
            window_norms.push(gnorm);
            epoch_norms.push(gnorm);

            if (b + 1) % eval_every == 0 || b + 1 == steps_per_epoch {
                let (eval_loss, eval_metric) = eval_pass(&mut run, &data)?;
                let wl = window_losses.iter().sum::<f64>() / window_losses.len() as f64;
                let gm = window_norms.iter().sum::<f64>() / window_norms.len() as f64;
                let gs = crate::tensor::population_stdev(&window_norms);
                records.push(MetricsRecord {
                    step,
                    epoch: epoch as f64 + (b + 1) as f64 / steps_per_epoch as f64,
                    train_loss: wl,
                    eval_loss,
                    eval_metric,
                    grad_norm_mean: gm,
                    grad_norm_std: gs,
                });
                window_losses.clear();
                window_norms.clear();
            }
        }
        grad_traces.push(GradNormTrace::summarize(epoch, epoch_norms));
    }

    // Persist artifacts (also on divergence).
    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_to_csv(&records))?;

    let mut gn = String::from("epoch,minibatch,grad_norm\n");
    for tr in &grad_traces {
        for (i, v) in tr.norms.iter().enumerate() {
            let _ = writeln!(gn, "{},{},{}", tr.epoch, i, fmt_float(*v));
        }
    }
    std::fs::write(out_dir.join("gradnorms.csv"), gn)?;

    let checkpoint_path = out_dir.join("final.hpnc");
    checkpoint::save(&checkpoint_path, &model_checkpoint(&run, &optimizer, step))?;

    let finite_metrics: Vec<f64> = records.iter().map(|r| r.eval_metric).collect();
    let best = match data.task {
        // higher accuracy is better; lower MSE is better
        Task::MnistBayes => finite_metrics.iter().cloned().fold(f64::MIN, f64::max),
        Task::SyntheticDenoise => finite_metrics.iter().cloned().fold(f64::MAX, f64::min),
    };
    let last = *finite_metrics.last().unwrap();
    let wall_seconds = started.elapsed().as_secs_f64();

    let mut summary = String::new();
    let _ = writeln!(summary, "task = {}", cfg.task);
    let _ = writeln!(summary, "mode = {}", cfg.mode);
    let _ = writeln!(summary, "seed = {}", cfg.seed);
    let _ = writeln!(summary, "diverged = {diverged}");
    let _ = writeln!(summary, "best_eval_metric = {}", fmt_float(best));
    let _ = writeln!(summary, "last_eval_metric = {}", fmt_float(last));
    let _ = writeln!(summary, "wall_seconds = {wall_seconds:.3}");
    std::fs::write(out_dir.join("summary.txt"), summary)?;

    Ok(RunSummary {
        diverged,
        records,
        best_eval_metric: best,
        last_eval_metric: last,
        grad_traces,
        wall_seconds,
        metrics_path,
        checkpoint_path,
    })
}

/// Sweep axes supported by `run_sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Mode,
    Widths,
    Depth,
    InputDim,
    Activation,
    Lr,
}

pub fn parse_axis(s: &str) -> Result<SweepAxis> {
    match s {
        "mode" => Ok(SweepAxis::Mode),
        "widths" => Ok(SweepAxis::Widths),
        "depth" => Ok(SweepAxis::Depth),
        "input_dim" => Ok(SweepAxis::InputDim),
        "activation" => Ok(SweepAxis::Activation),
        "lr" => Ok(SweepAxis::Lr),
        other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
    }
}

fn apply_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Mode => c.mode = value.to_string(),
        SweepAxis::Widths => {
            let widths: std::result::Result<Vec<usize>, _> =
                value.split('x').map(|v| v.trim().parse::<usize>()).collect();
            c.trunk_widths =
                widths.map_err(|e| Error::Config(format!("bad widths `{value}`: {e}")))?;
        }
        SweepAxis::Depth => {
            let depth: usize = value
                .parse()
                .map_err(|e| Error::Config(format!("bad depth `{value}`: {e}")))?;
            if depth == 0 {
                return Err(Error::Config("depth must be >= 1".into()));
            }
            // Exponentially growing widths: 16 * 2^k per hidden layer.
            c.trunk_widths = (0..depth).map(|k| 16usize << k).collect();
        }
        SweepAxis::InputDim => {
            c.input_dim = value
                .parse()
                .map_err(|e| Error::Config(format!("bad input_dim `{value}`: {e}")))?;
        }
        SweepAxis::Activation => c.trunk_activation = value.to_string(),
        SweepAxis::Lr => {
            c.lr = value
                .parse()
                .map_err(|e| Error::Config(format!("bad lr `{value}`: {e}")))?;
        }
    }
    c.validate()?;
    Ok(c)
}

/// One run per value; diverged runs are recorded and never abort the sweep.
/// Writes an aggregate `sweep.csv` in the base output directory.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<(String, std::result::Result<RunSummary, String>)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep requires at least one value".into()));
    }
    let base_dir = PathBuf::from(&base.output_dir);
    std::fs::create_dir_all(&base_dir)?;
    let mut results = Vec::new();
    for value in values {
        let label = value.replace(['/', ' '], "_");
        let outcome = apply_axis(base, axis, value).and_then(|mut cfg| {
            cfg.output_dir = base_dir
                .join(format!("{axis:?}_{label}").to_lowercase())
                .to_string_lossy()
                .into_owned();
            run_experiment(&cfg)
        });
        results.push((value.clone(), outcome.map_err(|e| e.to_string())));
    }
    let mut table = String::from("value,diverged,best_eval_metric,last_eval_metric,error\n");
    for (value, outcome) in &results {
        match outcome {
            Ok(s) => {
                let _ = writeln!(
                    table,
                    "{value},{},{},{},",
                    s.diverged,
                    fmt_float(s.best_eval_metric),
                    fmt_float(s.last_eval_metric)
                );
            }
            Err(e) => {
                let _ = writeln!(table, "{value},,,,{}", e.replace(',', ";"));
            }
        }
    }
    std::fs::write(base_dir.join("sweep.csv"), table)?;
    Ok(results)
}

/// Diagnose a model at init (or from a checkpoint): weight-std sweep over a
/// gamma grid plus the proportionality fit. Writes `weight_sweep.csv` and
/// returns (slope, intercept, r2).
pub fn cmd_diagnose(
    cfg: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    out_dir: &Path,
) -> Result<(f64, f64, f64)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let task = parse_task(&cfg.task)?;
    let feature_dim = match task {
        Task::MnistBayes => 784,
        Task::SyntheticDenoise => cfg.synth_d,
    };
    let mut run = build_model(cfg, feature_dim)?;
    let mut optimizer = build_optimizer(cfg)?;
    if let Some(path) = checkpoint_path {
        let ckpt = checkpoint::load(path)?;
        restore_from_checkpoint(&mut run, &mut optimizer, &ckpt)?;
    }
    let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let rows = weight_std_sweep(&run.model, &grid, None)?;
    let fit = fit_proportionality(&rows)?;

    let mut csv = String::from("gamma,agg_std,agg_l2\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{}",
            fmt_float(r.gamma),
            fmt_float(r.agg_std),
            fmt_float(r.agg_l2)
        );
    }
    std::fs::write(out_dir.join("weight_sweep.csv"), csv)?;

    let mut samples = String::from("gamma,value\n");
    for r in &rows {
        for v in r.raw_samples.iter().take(64) {
            let _ = writeln!(samples, "{},{}", fmt_float(r.gamma), fmt_float(*v));
        }
    }
    std::fs::write(out_dir.join("weight_samples.csv"), samples)?;
    Ok(fit)
}
