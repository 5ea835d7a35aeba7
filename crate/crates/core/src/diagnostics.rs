//! Measurement instruments: predicted-weight statistics as the conditioning
//! input sweeps its range, least-squares proportionality fits, and
//! gradient-norm dispersion traces.

use crate::error::{Error, Result};
use crate::hypernet::{predict_params, GammaSample, HypernetModel};
use crate::layers::{mlp_forward_layers, LayerSpec};
use crate::tensor::{population_stdev, Tensor};

/// One sweep point: statistics of the predicted parameters (and optionally
/// of the primary's layer activations on a probe batch) at a given gamma.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub gamma: f64,
    /// (tensor name, stdev of its predicted values)
    pub per_tensor_std: Vec<(String, f64)>,
    /// stdev over all predicted scalars
    pub agg_std: f64,
    /// l2 norm over all predicted scalars
    pub agg_l2: f64,
    /// per-layer activation stdev on the probe batch, when one was supplied
    pub activation_std: Option<Vec<f64>>,
    /// capped raw samples of predicted values, for external density plots
    pub raw_samples: Vec<f64>,
}

/// Per-epoch gradient-norm trace: raw per-minibatch values plus summaries.
#[derive(Debug, Clone)]
pub struct GradNormTrace {
    pub epoch: usize,
    pub norms: Vec<f64>,
    pub mean: f64,
    pub stdev: f64,
    /// stdev / mean; 0 when the mean is 0.
    pub coefficient_of_variation: f64,
}

impl GradNormTrace {
    pub fn summarize(epoch: usize, norms: Vec<f64>) -> GradNormTrace {
        let n = norms.len().max(1) as f64;
        let mean = norms.iter().sum::<f64>() / n;
        let stdev = population_stdev(&norms);
        let cv = if mean > 0.0 { stdev / mean } else { 0.0 };
        GradNormTrace {
            epoch,
            norms,
            mean,
            stdev,
            coefficient_of_variation: cv,
        }
    }
}

/// Cap on raw exported samples per tensor.
pub const RAW_SAMPLE_CAP: usize = 256;

/// Sweep the model's predictions over a gamma grid without mutating it.
///
/// `probe` optionally supplies the primary architecture and a probe batch;
/// when present each row also records per-layer activation stdev under the
/// predicted parameters.
pub fn weight_std_sweep(
    model: &HypernetModel,
    gamma_grid: &[f64],
    probe: Option<(&[LayerSpec], &Tensor)>,
) -> Result<Vec<SweepRow>> {
    if gamma_grid.is_empty() {
        return Err(Error::Invalid("gamma grid must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(gamma_grid.len());
    for &gamma in gamma_grid {
        let theta = predict_params(model, &GammaSample::scalar(gamma))?;
        let mut per_tensor = Vec::with_capacity(theta.len());
        let mut all = Vec::with_capacity(theta.total_scalars());
        let mut raw = Vec::new();
        for (name, t) in theta.iter() {
            let d = t.data();
            per_tensor.push((name.to_string(), population_stdev(&d)));
            all.extend_from_slice(&d);
            raw.extend(d.iter().take(RAW_SAMPLE_CAP).copied());
        }
        let agg_std = population_stdev(&all);
        let agg_l2 = all.iter().map(|x| x * x).sum::<f64>().sqrt();
        let activation_std = match probe {
            Some((specs, batch)) => {
                let layers = mlp_forward_layers(&theta, specs, batch)?;
                Some(
                    layers
                        .iter()
                        .map(|t| population_stdev(&t.data()))
                        .collect(),
                )
            }
            None => None,
        };
        rows.push(SweepRow {
            gamma,
            per_tensor_std: per_tensor,
            agg_std,
            agg_l2,
            activation_std,
            raw_samples: raw,
        });
    }
    Ok(rows)
}

/// Ordinary least squares of the aggregate stdev on gamma.
///
/// Returns (slope, intercept, r_squared). For zero-variance targets r^2 is
/// defined as 0.
pub fn fit_proportionality(rows: &[SweepRow]) -> Result<(f64, f64, f64)> {
    if rows.len() < 3 {
        return Err(Error::Invalid(format!(
            "proportionality fit needs at least 3 rows, got {}",
            rows.len()
        )));
    }
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| r.gamma).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.agg_std).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("degenerate grid: all gamma values equal".into()));
    }
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if syy == 0.0 {
        // perfectly flat response: slope 0 by convention, r^2 undefined -> 0
        return Ok((0.0, my, 0.0));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = {
        let ss_res: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let e = y - (slope * x + intercept);
                e * e
            })
            .sum();
        1.0 - ss_res / syy
    };
    Ok((slope, intercept, r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::{hypernet_init, Parametrization};
    use crate::layers::LayerSpec;
    use crate::rng::stream_rng;
    use crate::tensor::Activation;

    fn grid() -> Vec<f64> {
        (1..=10).map(|i| i as f64 / 10.0).collect()
    }

    fn tiny_primary() -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(6, 8, Activation::Relu),
            LayerSpec::new(8, 3, Activation::Linear),
        ]
    }

    #[test]
    fn default_sweep_is_exactly_linear() {
        let mut rng = stream_rng(31, "diag-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[16, 32],
            Activation::LeakyRelu(0.01),
            Parametrization::Default,
            1,
            &mut rng,
        )
        .unwrap();
        let rows = weight_std_sweep(&m, &grid(), None).unwrap();
        let at1 = rows.last().unwrap().agg_std;
        for row in &rows {
            let want = row.gamma * at1;
            let rel = (row.agg_std - want).abs() / (want.abs() + 1e-300);
            assert!(rel < 1e-10, "gamma {}: {} vs {}", row.gamma, row.agg_std, want);
        }
        let (slope, intercept, r2) = fit_proportionality(&rows).unwrap();
        assert!(r2 > 0.9999, "r2 = {r2}");
        assert!(intercept.abs() < 1e-8 * slope, "intercept = {intercept}");
    }

    #[test]
    fn default_at_gamma_zero_predicts_zero() {
        let mut rng = stream_rng(32, "diag-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[8, 16],
            Activation::LeakyRelu(0.01),
            Parametrization::Default,
            1,
            &mut rng,
        )
        .unwrap();
        let rows = weight_std_sweep(&m, &[0.0], None).unwrap();
        assert_eq!(rows[0].agg_std, 0.0);
        assert_eq!(rows[0].agg_l2, 0.0);
    }

    #[test]
    fn npa_sweep_is_near_flat() {
        let mut rng = stream_rng(33, "diag-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[16, 32],
            Activation::LeakyRelu(0.01),
            Parametrization::Npa,
            1,
            &mut rng,
        )
        .unwrap();
        let rows = weight_std_sweep(&m, &grid(), None).unwrap();
        let max = rows.iter().map(|r| r.agg_std).fold(f64::MIN, f64::max);
        let min = rows.iter().map(|r| r.agg_std).fold(f64::MAX, f64::min);
        assert!(max / min < 2.0, "ratio {}", max / min);
        let (slope, _, _) = fit_proportionality(&rows).unwrap();
        let mean_std = rows.iter().map(|r| r.agg_std).sum::<f64>() / rows.len() as f64;
        assert!(slope.abs() / mean_std < 0.5, "slope/mean = {}", slope / mean_std);
    }

    #[test]
    fn constant_rows_fit_convention() {
        let rows: Vec<SweepRow> = grid()
            .iter()
            .map(|&g| SweepRow {
                gamma: g,
                per_tensor_std: vec![],
                agg_std: 0.42,
                agg_l2: 1.0,
                activation_std: None,
                raw_samples: vec![],
            })
            .collect();
        let (slope, _, r2) = fit_proportionality(&rows).unwrap();
        // mean of identical values can differ from them by one ulp, so the
        // flat-response convention is only exact up to rounding
        assert!(slope.abs() < 1e-12, "slope = {slope}");
        assert!(r2.abs() < 1e-12, "r2 = {r2}");
    }

    #[test]
    fn degenerate_grid_errors() {
        let rows: Vec<SweepRow> = (0..4)
            .map(|_| SweepRow {
                gamma: 0.5,
                per_tensor_std: vec![],
                agg_std: 0.1,
                agg_l2: 1.0,
                activation_std: None,
                raw_samples: vec![],
            })
            .collect();
        assert!(fit_proportionality(&rows).is_err());
    }

    #[test]
    fn sweep_does_not_mutate_model() {
        let mut rng = stream_rng(34, "diag-test");
        let m = hypernet_init(
            &tiny_primary(),
            &[8, 16],
            Activation::LeakyRelu(0.01),
            Parametrization::Npa,
            1,
            &mut rng,
        )
        .unwrap();
        let before: Vec<Vec<u64>> = m
            .omega
            .iter()
            .map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect())
            .collect();
        let r1 = weight_std_sweep(&m, &grid(), None).unwrap();
        let r2 = weight_std_sweep(&m, &grid(), None).unwrap();
        let after: Vec<Vec<u64>> = m
            .omega
            .iter()
            .map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.agg_std.to_bits(), b.agg_std.to_bits());
        }
    }

    #[test]
    fn grad_trace_summaries() {
        let t = GradNormTrace::summarize(0, vec![0.0, 0.0, 0.0]);
        assert_eq!(t.mean, 0.0);
        assert_eq!(t.coefficient_of_variation, 0.0);

        let t = GradNormTrace::summarize(1, vec![2.0]);
        assert_eq!(t.stdev, 0.0);

        let t = GradNormTrace::summarize(2, vec![1.0, 3.0]);
        assert!((t.mean - 2.0).abs() < 1e-15);
        assert!((t.stdev - 1.0).abs() < 1e-15);
        assert!((t.coefficient_of_variation - 0.5).abs() < 1e-15);
    }
}
