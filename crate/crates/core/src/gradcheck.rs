//! Central finite-difference gradient checking.
//!
//! Used as the independent oracle against the analytic adjoints in
//! `tensor.rs`. The checker only perturbs leaf data and re-runs the supplied
//! closure, so it stays independent of the reverse-mode path it validates.

use crate::error::Result;
use crate::tensor::{backward, Tensor};

/// Denominator floor for the relative error. The central difference carries
/// rounding noise of order `eps * |f| / h`, so components whose true
/// gradient is zero would otherwise divide that noise by itself and report
/// an error near 1. The floor is scaled to the loss magnitude.
fn noise_floor(loss_value: f64) -> f64 {
    1e-4 * loss_value.abs().max(1.0)
}

/// Max over components of
/// `|analytic - central| / max(|analytic| + |central|, floor)`
/// for a scalar-valued `f` differentiated w.r.t. `x`, where `floor` absorbs
/// the finite-difference noise on zero-gradient components.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    x.zero_grad();
    let loss = f(x)?;
    backward(&loss)?;
    let floor = noise_floor(loss.item());
    let analytic = x
        .grad()
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        x.set_data(plus)?;
        let fp = f(x)?.item();

        let mut minus = base.clone();
        minus[i] -= h;
        x.set_data(minus)?;
        let fm = f(x)?.item();

        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs()
            / (analytic[i].abs() + numeric.abs()).max(floor);
        max_err = max_err.max(err);
    }
    x.set_data(base)?;
    Ok(max_err)
}

/// Check every parameter tensor of a model against finite differences.
/// `f` recomputes the scalar loss from scratch on each call.
pub fn finite_diff_check_many<F>(f: F, params: &[&Tensor], h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let mut max_err = 0.0f64;
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    backward(&loss)?;
    let floor = noise_floor(loss.item());
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            p.set_data(plus)?;
            let fp = f()?.item();

            let mut minus = base.clone();
            minus[i] -= h;
            p.set_data(minus)?;
            let fm = f()?.item();

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            max_err = max_err.max(err);
        }
        p.set_data(base)?;
    }
    Ok(max_err)
}

/// Named finite-difference checks covering the op set and the full
/// hypernetwork-through-primary composition. Returns (name, max rel err).
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    use crate::hypernet::{hypernet_init, predict_params, GammaRange, GammaSample, Parametrization};
    use crate::layers::{init_mlp_params, mlp_forward, LayerSpec, Role};
    use crate::layers::FanMode;
    use crate::rng::stream_rng;
    use crate::tensor::{
        activation, add_bias, cross_entropy_mean, layer_norm, matmul, mean, scale, sum,
        sum_squares, total_variation, Activation, Tensor,
    };
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }
    let mut rng = stream_rng(seed, "gradcheck");
    let mut results: Vec<(String, f64)> = Vec::new();

    // matmul: 3x4 . 4x2, reduced to a scalar by summing.
    {
        let a = Tensor::param(vec![3, 4], randn_vec(&mut rng, 12))?;
        let b = Tensor::param(vec![4, 2], randn_vec(&mut rng, 8))?;
        let f = || Ok(sum(&matmul(&a, &b)?));
        let err = finite_diff_check_many(f, &[&a, &b], 1e-6)?;
        results.push(("matmul".into(), err));
    }

    // matmul against a transposed right operand: 3x4 . (2x4)^T.
    {
        let a = Tensor::param(vec![3, 4], randn_vec(&mut rng, 12))?;
        let b = Tensor::param(vec![2, 4], randn_vec(&mut rng, 8))?;
        let f = || Ok(sum_squares(&crate::tensor::matmul_nt(&a, &b)?));
        let err = finite_diff_check_many(f, &[&a, &b], 1e-6)?;
        results.push(("matmul_nt".into(), err));
    }

    // broadcast bias over a batch (adjoint is a column sum).
    {
        let x = Tensor::param(vec![5, 3], randn_vec(&mut rng, 15))?;
        let b = Tensor::param(vec![3], randn_vec(&mut rng, 3))?;
        let f = || Ok(sum_squares(&add_bias(&x, &b)?));
        let err = finite_diff_check_many(f, &[&x, &b], 1e-6)?;
        results.push(("add_bias".into(), err));
    }

    // activations, evaluated away from kinks.
    for (name, act) in [
        ("leaky_relu", Activation::LeakyRelu(0.01)),
        ("tanh", Activation::Tanh),
        ("gelu", Activation::Gelu),
        ("silu", Activation::Silu),
    ] {
        let vals: Vec<f64> = randn_vec(&mut rng, 8)
            .into_iter()
            .map(|v| if v.abs() < 0.2 { v + 0.5 } else { v })
            .collect();
        let x = Tensor::param(vec![8], vals)?;
        let err = finite_diff_check(|t| Ok(sum_squares(&activation(t, act))), &x, 1e-6)?;
        results.push((format!("activation_{name}"), err));
    }

    // layer norm over features.
    {
        let x = Tensor::param(vec![4, 6], randn_vec(&mut rng, 24))?;
        // probe with a random weighted sum: the squared norm of a normalized
        // row is nearly constant, which would leave only a vanishing
        // eps-scale gradient and a meaningless relative error
        let w = Tensor::new(vec![4, 6], randn_vec(&mut rng, 24))?;
        let err = finite_diff_check(
            |t| Ok(sum(&crate::tensor::mul(&layer_norm(t, 1e-5)?, &w)?)),
            &x,
            1e-6,
        )?;
        results.push(("layer_norm".into(), err));
    }

    // softmax cross entropy against integer labels.
    {
        let logits = Tensor::param(vec![6, 4], randn_vec(&mut rng, 24))?;
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4usize)).collect();
        let err = finite_diff_check(|t| cross_entropy_mean(t, &labels), &logits, 1e-6)?;
        results.push(("cross_entropy".into(), err));
    }

    // total variation, with every neighbor difference bounded away from the
    // |.| kink at zero so the finite-difference stencil stays on one branch.
    {
        let noise = randn_vec(&mut rng, 12);
        let mut vals = Vec::with_capacity(12);
        let mut acc = 0.0;
        for (i, n) in noise.iter().enumerate() {
            let step = (0.3 + n.abs()) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            acc = if i % 6 == 0 { *n } else { acc + step };
            vals.push(acc);
        }
        let x = Tensor::param(vec![2, 6], vals)?;
        let err = finite_diff_check(|t| total_variation(t), &x, 1e-6)?;
        results.push(("total_variation".into(), err));
    }

    // three-layer MLP end to end.
    {
        let arch = vec![
            LayerSpec::new(5, 8, Activation::Tanh),
            LayerSpec::new(8, 8, Activation::Silu),
            LayerSpec::new(8, 3, Activation::Linear),
        ];
        let params = init_mlp_params(&arch, FanMode::FanOut, Role::PrimaryTheta, &mut rng)?;
        let x = Tensor::new(vec![4, 5], randn_vec(&mut rng, 20))?;
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let f = || Ok(sum_squares(&mlp_forward(&params, &arch, &x)?));
        let err = finite_diff_check_many(f, &refs, 1e-6)?;
        results.push(("mlp_3layer".into(), err));
    }

    // full hypernet-through-primary: loss as a function of omega.
    {
        let primary_arch = vec![
            LayerSpec::new(4, 6, Activation::Tanh),
            LayerSpec::new(6, 2, Activation::Linear),
        ];
        let model = hypernet_init(
            &primary_arch,
            &[8, 8],
            Activation::Tanh,
            Parametrization::Npa,
            1,
            &mut rng,
        )?;
        let x = Tensor::new(vec![3, 4], randn_vec(&mut rng, 12))?;
        let target = Tensor::new(vec![3, 2], randn_vec(&mut rng, 6))?;
        let gamma = GammaSample {
            values: vec![0.37],
            range: GammaRange::ZeroOne,
        };
        let tensors: Vec<Tensor> = model.omega.iter().map(|(_, t)| t.clone()).collect();
        let mut refs: Vec<&Tensor> = tensors.iter().collect();
        let theta0: Vec<Tensor> = model
            .theta0
            .as_ref()
            .map(|t0| t0.iter().map(|(_, t)| t.clone()).collect())
            .unwrap_or_default();
        for t in &theta0 {
            refs.push(t);
        }
        let f = || {
            let theta = predict_params(&model, &gamma)?;
            let pred = mlp_forward(&theta, &primary_arch, &x)?;
            let diff = crate::tensor::sub(&pred, &target)?;
            Ok(scale(&sum_squares(&diff), 1.0 / 3.0))
        };
        let err = finite_diff_check_many(f, &refs, 1e-6)?;
        results.push(("hypernet_through_primary".into(), err));
    }

    // mean as a scaled sum.
    {
        let x = Tensor::param(vec![7], randn_vec(&mut rng, 7))?;
        let err = finite_diff_check(|t| Ok(scale(&mean(t), 2.5)), &x, 1e-6)?;
        results.push(("mean".into(), err));
    }

    Ok(results)
}
