//! The two update rules used across the experiments: SGD with Nesterov
//! momentum (lookahead form) and AdamW with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::ParamSet;

/// SGD with Nesterov momentum.
///
/// The single supported variant is the lookahead form:
/// `v <- beta*v + g; p <- p - lr*(g + beta*v)`.
pub struct SgdNesterov {
    pub lr: f64,
    pub beta: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl SgdNesterov {
    pub fn new(lr: f64, beta: f64) -> Self {
        SgdNesterov {
            lr,
            beta,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamSet) -> Result<()> {
        for (name, p) in params.iter() {
            let grad = p.grad().ok_or_else(|| Error::MissingGrad(name.to_string()))?;
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let mut data = p.to_vec();
            for i in 0..data.len() {
                v[i] = self.beta * v[i] + grad[i];
                data[i] -= self.lr * (grad[i] + self.beta * v[i]);
            }
            p.set_data(data)?;
        }
        Ok(())
    }

    pub fn state_arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<_> = self
            .velocity
            .iter()
            .map(|(k, v)| (format!("sgd.v.{k}"), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn restore_state(&mut self, arrays: &[(String, Vec<f64>)]) {
        self.velocity.clear();
        for (name, data) in arrays {
            if let Some(key) = name.strip_prefix("sgd.v.") {
                self.velocity.insert(key.to_string(), data.clone());
            }
        }
    }
}

/// AdamW: bias-corrected moment estimates with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn with_defaults(lr: f64, weight_decay: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn step(&mut self, params: &ParamSet) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter() {
            let grad = p.grad().ok_or_else(|| Error::MissingGrad(name.to_string()))?;
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
            p.set_data(data)?;
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn state_arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![("adamw.t".to_string(), vec![self.step_count as f64])];
        let mut keys: Vec<_> = self.m.keys().cloned().collect();
        keys.sort();
        for k in keys {
            out.push((format!("adamw.m.{k}"), self.m[&k].clone()));
            out.push((format!("adamw.v.{k}"), self.v[&k].clone()));
        }
        out
    }

    pub fn restore_state(&mut self, arrays: &[(String, Vec<f64>)]) {
        self.m.clear();
        self.v.clear();
        self.step_count = 0;
        for (name, data) in arrays {
            if name == "adamw.t" {
                self.step_count = data[0] as u64;
            } else if let Some(key) = name.strip_prefix("adamw.m.") {
                self.m.insert(key.to_string(), data.clone());
            } else if let Some(key) = name.strip_prefix("adamw.v.") {
                self.v.insert(key.to_string(), data.clone());
            }
        }
    }
}

/// Either update rule behind one interface for the training loop.
pub enum Optimizer {
    Sgd(SgdNesterov),
    AdamW(AdamW),
}

impl Optimizer {
    pub fn step(&mut self, params: &ParamSet) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params),
            Optimizer::AdamW(o) => o.step(params),
        }
    }

    pub fn state_arrays(&self) -> Vec<(String, Vec<f64>)> {
        match self {
            Optimizer::Sgd(o) => o.state_arrays(),
            Optimizer::AdamW(o) => o.state_arrays(),
        }
    }

    pub fn restore_state(&mut self, arrays: &[(String, Vec<f64>)]) {
        match self {
            Optimizer::Sgd(o) => o.restore_state(arrays),
            Optimizer::AdamW(o) => o.restore_state(arrays),
        }
    }
}
