use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{Gradients, Matrix};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

impl Moments {
    pub fn zeros_like(p: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// One bias-corrected Adam step. `step` counts from 1.
pub fn adam_update(param: &mut Matrix, grad: &Matrix, moments: &mut Moments, lr: f64, step: u64) {
    debug_assert_eq!(param.shape(), grad.shape());
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let data = param.data_mut();
    let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
    for k in 0..data.len() {
        let g = grad.data()[k];
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        data[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Adam over a named parameter group with a shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    /// Updates every parameter that has a gradient entry.
    pub fn step<N: AsRef<str>>(&mut self, params: Vec<(N, &mut Matrix)>, grads: &Gradients, lr: f64) {
        if params.is_empty() {
            return;
        }
        self.step += 1;
        for (name, param) in params {
            let name = name.as_ref();
            let Some(g) = grads.get(name) else { continue };
            let moments = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments::zeros_like(param));
            adam_update(param, g, moments, lr, self.step);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    CosineToZero,
    Constant,
}

impl Schedule {
    /// Learning-rate multiplier at 0-based `step` of `total` steps. Cosine
    /// decays from 1 at the first step to 0 at the last.
    pub fn multiplier(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::CosineToZero => {
                if total <= 1 {
                    return 1.0;
                }
                let t = step.min(total - 1) as f64 / (total - 1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}
