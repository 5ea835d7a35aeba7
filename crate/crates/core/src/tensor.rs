//! Dense f64 tensors with define-by-run reverse-mode automatic differentiation.
//!
//! The graph is rebuilt on every forward pass: each op allocates a fresh node
//! holding its result and handles to its inputs. `backward` walks the graph in
//! reverse topological order and accumulates adjoints into the `grad` buffer
//! of every reachable leaf with `requires_grad` (and any node marked with
//! `retain_grad`). Gradients accumulate across backward calls until
//! explicitly zeroed, matching the usual SGD loop structure.
//!
//! Broadcasting is deliberately restricted to bias-over-batch so every
//! adjoint stays small enough to audit.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Elementwise nonlinearities supported on the graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    /// Exact Gaussian-CDF formulation.
    Gelu,
    Silu,
    Linear,
}

impl Activation {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x >= 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x * normal_cdf(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Linear => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Linear => 1.0,
        }
    }

    /// True for activations with A(αx) = αA(x) for α > 0.
    pub fn positively_homogeneous(self) -> bool {
        matches!(
            self,
            Activation::Relu | Activation::LeakyRelu(_) | Activation::Linear
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

enum Op {
    Leaf,
    Matmul(Tensor, Tensor),
    MatmulNt(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    /// `[batch, d] + [d]`, bias broadcast over the batch dimension.
    AddBias(Tensor, Tensor),
    /// `[batch, d] * [d]`, per-feature scale broadcast over the batch.
    MulBias(Tensor, Tensor),
    Sum(Tensor),
    Mean(Tensor),
    SumSquares(Tensor),
    L2Norm(Tensor),
    Reshape(Tensor),
    Activation(Tensor, Activation),
    /// Per-row normalization: (x - mean_row) / sqrt(var_row + eps).
    LayerNorm { x: Tensor, eps: f64 },
    /// Per-feature normalization with the statistics used at forward time.
    BatchNorm {
        x: Tensor,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        /// Training mode differentiates through the batch statistics.
        batch_stats: bool,
    },
    /// out = g * v / ||v||, with g a 1-element tensor.
    WeightNorm { v: Tensor, g: Tensor },
    /// Mean cross-entropy over rows, log-sum-exp stabilized; probs saved at forward.
    CrossEntropy {
        logits: Tensor,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Mean over rows of the sum of absolute first differences along each row.
    TotalVariation(Tensor),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::MatmulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MulBias(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumSquares(a)
            | Op::L2Norm(a)
            | Op::Reshape(a)
            | Op::Activation(a, _)
            | Op::TotalVariation(a) => vec![a],
            Op::LayerNorm { x, .. } => vec![x],
            Op::BatchNorm { x, .. } => vec![x],
            Op::WeightNorm { v, g } => vec![v, g],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    retain: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// A dense n-dimensional f64 tensor participating in a differentiation graph.
///
/// Cloning is cheap (shared handle). Values are immutable after creation
/// except through [`Tensor::set_data`], which is reserved for optimizer
/// updates between steps.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Invalid(format!("zero dimension in shape {shape:?}")));
    }
    if n != len {
        return Err(Error::Invalid(format!(
            "data length {len} does not match shape {shape:?}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        check_len(&shape, data.len())?;
        Ok(Self::leaf(shape, data, false))
    }

    /// A leaf that participates in gradient computation.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        check_len(&shape, data.len())?;
        Ok(Self::leaf(shape, data, true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![1], vec![v], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(shape, vec![0.0; n], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                retain: Cell::new(false),
                grad: RefCell::new(None),
                op: Op::Leaf,
            }),
        }
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad: false,
                retain: Cell::new(false),
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// Replace the stored values. Only intended for optimizer updates and
    /// in-place parameter edits between forward passes.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        check_len(&self.inner.shape, data.len())?;
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf)
    }

    /// Keep this node's adjoint after backward even though it is not a leaf.
    pub fn retain_grad(&self) {
        self.inner.retain.set(true);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn ptr(&self) -> *const Inner {
        Rc::as_ptr(&self.inner)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

// out[i, j] = sum_p a[i, p] * b[j, p] — both operands row-major, no copies
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            orow[j] = acc;
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = matmul_raw(&a.data(), &b.data(), m, k, n);
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        Op::Matmul(a.clone(), b.clone()),
    ))
}

/// `a @ b^T` without materializing the transpose (the hypernetwork heads
/// multiply a short feature row by a very wide weight matrix, where an
/// explicit transpose would copy megabytes per call).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul_nt", a)?;
    let (n, k2) = dims2("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = matmul_nt_raw(&a.data(), &b.data(), m, k, n);
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        Op::MatmulNt(a.clone(), b.clone()),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2("transpose", a)?;
    let data = transpose_raw(&a.data(), r, c);
    Ok(Tensor::from_op(vec![c, r], data, Op::Transpose(a.clone())))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        Op::Add(a.clone(), b.clone()),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        Op::Sub(a.clone(), b.clone()),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        Op::Mul(a.clone(), b.clone()),
    ))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|x| c * x).collect();
    Tensor::from_op(a.shape().to_vec(), data, Op::Scale(a.clone(), c))
}

/// `x[batch, d] + bias[d]`, the only supported broadcast.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, d) = dims2("add_bias", x)?;
    if bias.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let xd = x.data();
    let bd = bias.data();
    let mut data = Vec::with_capacity(batch * d);
    for i in 0..batch {
        for j in 0..d {
            data.push(xd[i * d + j] + bd[j]);
        }
    }
    Ok(Tensor::from_op(
        vec![batch, d],
        data,
        Op::AddBias(x.clone(), bias.clone()),
    ))
}

/// `x[batch, d] * s[d]`, per-feature scale broadcast over the batch.
pub fn mul_bias(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (batch, d) = dims2("mul_bias", x)?;
    if s.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "mul_bias",
            lhs: x.shape().to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    let xd = x.data();
    let sd = s.data();
    let mut data = Vec::with_capacity(batch * d);
    for i in 0..batch {
        for j in 0..d {
            data.push(xd[i * d + j] * sd[j]);
        }
    }
    Ok(Tensor::from_op(
        vec![batch, d],
        data,
        Op::MulBias(x.clone(), s.clone()),
    ))
}

pub fn sum(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    Tensor::from_op(vec![1], vec![s], Op::Sum(a.clone()))
}

pub fn mean(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    let n = a.numel() as f64;
    Tensor::from_op(vec![1], vec![s / n], Op::Mean(a.clone()))
}

pub fn sum_squares(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().map(|x| x * x).sum();
    Tensor::from_op(vec![1], vec![s], Op::SumSquares(a.clone()))
}

pub fn l2_norm(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().map(|x| x * x).sum();
    Tensor::from_op(vec![1], vec![s.sqrt()], Op::L2Norm(a.clone()))
}

pub fn reshape(a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    check_len(&shape, a.numel())?;
    Ok(Tensor::from_op(shape, a.to_vec(), Op::Reshape(a.clone())))
}

pub fn activation(a: &Tensor, act: Activation) -> Tensor {
    let data = a.data().iter().map(|&x| act.apply_scalar(x)).collect();
    Tensor::from_op(a.shape().to_vec(), data, Op::Activation(a.clone(), act))
}

/// Per-row layer normalization (population variance), without affine.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (batch, d) = dims2("layer_norm", x)?;
    if d < 2 {
        return Err(Error::Invalid(format!(
            "layer_norm requires at least 2 features, got {d}"
        )));
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(batch * d);
    for i in 0..batch {
        let row = &xd[i * d..(i + 1) * d];
        let mu: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        data.extend(row.iter().map(|v| (v - mu) * inv));
    }
    Ok(Tensor::from_op(
        vec![batch, d],
        data,
        Op::LayerNorm { x: x.clone(), eps },
    ))
}

/// Per-feature batch normalization using the supplied statistics.
///
/// In training mode the statistics are the batch's own and the adjoint
/// differentiates through them; in eval mode they are running statistics,
/// treated as constants.
pub fn batch_norm_with_stats(
    x: &Tensor,
    mean: Vec<f64>,
    var: Vec<f64>,
    eps: f64,
    batch_stats: bool,
) -> Result<Tensor> {
    let (batch, d) = dims2("batch_norm", x)?;
    if mean.len() != d || var.len() != d {
        return Err(Error::Invalid(format!(
            "batch_norm statistics length {} does not match feature count {d}",
            mean.len()
        )));
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(batch * d);
    for i in 0..batch {
        for j in 0..d {
            data.push((xd[i * d + j] - mean[j]) / (var[j] + eps).sqrt());
        }
    }
    Ok(Tensor::from_op(
        vec![batch, d],
        data,
        Op::BatchNorm {
            x: x.clone(),
            eps,
            mean,
            var,
            batch_stats,
        },
    ))
}

/// `g * v / ||v||_2`, with `g` a learnable 1-element tensor.
pub fn weight_norm_apply(v: &Tensor, g: &Tensor) -> Result<Tensor> {
    if g.numel() != 1 {
        return Err(Error::Invalid(
            "weight_norm gain must be a 1-element tensor".into(),
        ));
    }
    let norm: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Invalid(
            "weight_norm: zero-norm tensor has no direction".into(),
        ));
    }
    let gv = g.item();
    let data = v.data().iter().map(|x| gv * x / norm).collect();
    Ok(Tensor::from_op(
        v.shape().to_vec(),
        data,
        Op::WeightNorm {
            v: v.clone(),
            g: g.clone(),
        },
    ))
}

/// Mean categorical cross-entropy over rows, log-sum-exp stabilized.
pub fn cross_entropy_mean(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (batch, classes) = dims2("cross_entropy", logits)?;
    if labels.len() != batch {
        return Err(Error::Invalid(format!(
            "cross_entropy: {} labels for batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Invalid(format!(
            "cross_entropy: label {bad} out of range for {classes} classes"
        )));
    }
    let zd = logits.data();
    let mut probs = vec![0.0; batch * classes];
    let mut loss = 0.0;
    for i in 0..batch {
        let row = &zd[i * classes..(i + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - m).exp();
        }
        let lse = m + denom.ln();
        loss += lse - row[labels[i]];
        for j in 0..classes {
            probs[i * classes + j] = (row[j] - m).exp() / denom;
        }
    }
    loss /= batch as f64;
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        Op::CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
        },
    ))
}

/// Mean over rows of the sum of |x[i, j+1] - x[i, j]|.
pub fn total_variation(x: &Tensor) -> Result<Tensor> {
    let (batch, d) = dims2("total_variation", x)?;
    let xd = x.data();
    let mut tv = 0.0;
    for i in 0..batch {
        for j in 0..d - 1 {
            tv += (xd[i * d + j + 1] - xd[i * d + j]).abs();
        }
    }
    tv /= batch as f64;
    Ok(Tensor::from_op(
        vec![1],
        vec![tv],
        Op::TotalVariation(x.clone()),
    ))
}

/// Reduction kinds for [`reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    SumSquares,
    L2Norm,
    Variance,
    Stdev,
}

/// Reduce over the whole tensor (`axis = None`) or along one axis of a 2-D
/// tensor. Full-tensor sum/mean/sum-of-squares/l2-norm are differentiable;
/// variance, stdev and axis reductions are forward-only diagnostics.
pub fn reduce(kind: Reduction, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => Ok(match kind {
            Reduction::Sum => sum(a),
            Reduction::Mean => mean(a),
            Reduction::SumSquares => sum_squares(a),
            Reduction::L2Norm => l2_norm(a),
            Reduction::Variance => Tensor::scalar(population_variance(&a.data())),
            Reduction::Stdev => Tensor::scalar(population_variance(&a.data()).sqrt()),
        }),
        Some(ax) => {
            let (r, c) = dims2("reduce", a)?;
            if ax > 1 {
                return Err(Error::InvalidAxis {
                    axis: ax,
                    shape: a.shape().to_vec(),
                });
            }
            let (keep, red) = if ax == 0 { (c, r) } else { (r, c) };
            let mut out = vec![0.0; keep];
            let ad = a.data();
            for k in 0..keep {
                let slice: Vec<f64> = (0..red)
                    .map(|i| {
                        if ax == 0 {
                            ad[i * c + k]
                        } else {
                            ad[k * c + i]
                        }
                    })
                    .collect();
                out[k] = match kind {
                    Reduction::Sum => slice.iter().sum(),
                    Reduction::Mean => slice.iter().sum::<f64>() / red as f64,
                    Reduction::SumSquares => slice.iter().map(|x| x * x).sum(),
                    Reduction::L2Norm => slice.iter().map(|x| x * x).sum::<f64>().sqrt(),
                    Reduction::Variance => population_variance(&slice),
                    Reduction::Stdev => population_variance(&slice).sqrt(),
                };
            }
            Tensor::new(vec![keep], out)
        }
    }
}

/// Population variance (divide by N). The one convention used everywhere.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n
}

pub fn population_stdev(xs: &[f64]) -> f64 {
    population_variance(xs).sqrt()
}

/// Reverse-mode pass from a scalar loss. Accumulates into the `grad` buffer
/// of every reachable `requires_grad` leaf and every retained node.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let order = topo_order(loss);
    let mut adjoint: HashMap<*const Inner, Vec<f64>> = HashMap::new();
    adjoint.insert(loss.ptr(), vec![1.0]);

    for t in order.iter().rev() {
        let Some(g) = adjoint.remove(&t.ptr()) else {
            continue;
        };
        if t.inner.requires_grad || t.inner.retain.get() {
            t.accumulate_grad(&g);
        }
        propagate(t, &g, &mut adjoint);
    }
    Ok(())
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    // Iterative post-order DFS.
    let mut order = Vec::new();
    let mut visited: HashSet<*const Inner> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr()) {
            continue;
        }
        stack.push((t.clone(), true));
        for inp in t.inner.op.inputs() {
            if !visited.contains(&inp.ptr()) {
                stack.push((inp.clone(), false));
            }
        }
    }
    order
}

fn add_into(adjoint: &mut HashMap<*const Inner, Vec<f64>>, t: &Tensor, g: Vec<f64>) {
    match adjoint.entry(t.ptr()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (dst, src) in e.get_mut().iter_mut().zip(&g) {
                *dst += src;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

fn propagate(t: &Tensor, g: &[f64], adjoint: &mut HashMap<*const Inner, Vec<f64>>) {
    match &t.inner.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            // dA = dC * B^T, dB = A^T * dC
            let bt = transpose_raw(&b.data(), k, n);
            let da = matmul_raw(g, &bt, m, n, k);
            let at = transpose_raw(&a.data(), m, k);
            let db = matmul_raw(&at, g, k, m, n);
            add_into(adjoint, a, da);
            add_into(adjoint, b, db);
        }
        Op::MatmulNt(a, b) => {
            // C = A B^T with A: m x k, B: n x k, C: m x n
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[0];
            // dA = dC * B
            let da = matmul_raw(g, &b.data(), m, n, k);
            // dB = dC^T * A (dC is small in every call site, so transposing
            // it is cheap; B itself is never copied)
            let gt = transpose_raw(g, m, n);
            let db = matmul_raw(&gt, &a.data(), n, m, k);
            add_into(adjoint, a, da);
            add_into(adjoint, b, db);
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            add_into(adjoint, a, transpose_raw(g, c, r));
        }
        Op::Add(a, b) => {
            add_into(adjoint, a, g.to_vec());
            add_into(adjoint, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_into(adjoint, a, g.to_vec());
            add_into(adjoint, b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let da = g.iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
            let db = g.iter().zip(a.data().iter()).map(|(x, y)| x * y).collect();
            add_into(adjoint, a, da);
            add_into(adjoint, b, db);
        }
        Op::Scale(a, c) => {
            add_into(adjoint, a, g.iter().map(|x| c * x).collect());
        }
        Op::AddBias(x, bias) => {
            let (batch, d) = (x.shape()[0], x.shape()[1]);
            add_into(adjoint, x, g.to_vec());
            let mut db = vec![0.0; d];
            for i in 0..batch {
                for j in 0..d {
                    db[j] += g[i * d + j];
                }
            }
            add_into(adjoint, bias, db);
        }
        Op::MulBias(x, s) => {
            let (batch, d) = (x.shape()[0], x.shape()[1]);
            let sd = s.data();
            let xd = x.data();
            let mut dx = vec![0.0; batch * d];
            let mut ds = vec![0.0; d];
            for i in 0..batch {
                for j in 0..d {
                    dx[i * d + j] = g[i * d + j] * sd[j];
                    ds[j] += g[i * d + j] * xd[i * d + j];
                }
            }
            add_into(adjoint, x, dx);
            add_into(adjoint, s, ds);
        }
        Op::Sum(a) => {
            add_into(adjoint, a, vec![g[0]; a.numel()]);
        }
        Op::Mean(a) => {
            let c = g[0] / a.numel() as f64;
            add_into(adjoint, a, vec![c; a.numel()]);
        }
        Op::SumSquares(a) => {
            let da = a.data().iter().map(|x| 2.0 * x * g[0]).collect();
            add_into(adjoint, a, da);
        }
        Op::L2Norm(a) => {
            let norm = t.item();
            if norm > 0.0 {
                let da = a.data().iter().map(|x| g[0] * x / norm).collect();
                add_into(adjoint, a, da);
            }
        }
        Op::Reshape(a) => {
            add_into(adjoint, a, g.to_vec());
        }
        Op::Activation(a, act) => {
            let da = a
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| gv * act.derivative(x))
                .collect();
            add_into(adjoint, a, da);
        }
        Op::LayerNorm { x, eps } => {
            let (batch, d) = (x.shape()[0], x.shape()[1]);
            let xd = x.data();
            let mut dx = vec![0.0; batch * d];
            for i in 0..batch {
                let row = &xd[i * d..(i + 1) * d];
                let grow = &g[i * d..(i + 1) * d];
                let mu: f64 = row.iter().sum::<f64>() / d as f64;
                let var: f64 =
                    row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                let gm: f64 = grow.iter().sum::<f64>() / d as f64;
                let gxm: f64 =
                    grow.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[i * d + j] = inv * (grow[j] - gm - xhat[j] * gxm);
                }
            }
            add_into(adjoint, x, dx);
        }
        Op::BatchNorm {
            x,
            eps,
            mean,
            var,
            batch_stats,
        } => {
            let (batch, d) = (x.shape()[0], x.shape()[1]);
            let xd = x.data();
            let mut dx = vec![0.0; batch * d];
            for j in 0..d {
                let inv = 1.0 / (var[j] + eps).sqrt();
                if *batch_stats {
                    let mut gm = 0.0;
                    let mut gxm = 0.0;
                    for i in 0..batch {
                        let xhat = (xd[i * d + j] - mean[j]) * inv;
                        gm += g[i * d + j];
                        gxm += g[i * d + j] * xhat;
                    }
                    gm /= batch as f64;
                    gxm /= batch as f64;
                    for i in 0..batch {
                        let xhat = (xd[i * d + j] - mean[j]) * inv;
                        dx[i * d + j] = inv * (g[i * d + j] - gm - xhat * gxm);
                    }
                } else {
                    for i in 0..batch {
                        dx[i * d + j] = g[i * d + j] * inv;
                    }
                }
            }
            add_into(adjoint, x, dx);
        }
        Op::WeightNorm { v, g: gain } => {
            let vd = v.data();
            let norm: f64 = vd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let xhat: Vec<f64> = vd.iter().map(|x| x / norm).collect();
            let dot: f64 = xhat.iter().zip(g).map(|(a, b)| a * b).sum();
            let gv = gain.item();
            let dv: Vec<f64> = xhat
                .iter()
                .zip(g)
                .map(|(&xh, &gu)| gv / norm * (gu - xh * dot))
                .collect();
            add_into(adjoint, v, dv);
            add_into(adjoint, gain, vec![dot]);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
            let scale = g[0] / batch as f64;
            let mut dz = vec![0.0; batch * classes];
            for i in 0..batch {
                for j in 0..classes {
                    let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                    dz[i * classes + j] = scale * (probs[i * classes + j] - onehot);
                }
            }
            add_into(adjoint, logits, dz);
        }
        Op::TotalVariation(x) => {
            let (batch, d) = (x.shape()[0], x.shape()[1]);
            let xd = x.data();
            let scale = g[0] / batch as f64;
            let mut dx = vec![0.0; batch * d];
            for i in 0..batch {
                for j in 0..d - 1 {
                    let diff = xd[i * d + j + 1] - xd[i * d + j];
                    let s = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    dx[i * d + j + 1] += scale * s;
                    dx[i * d + j] -= scale * s;
                }
            }
            add_into(adjoint, x, dx);
        }
    }
}
