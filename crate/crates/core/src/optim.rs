//! First-order optimizers over `Parameters` containers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::Parameters;

/// `lr · ½(1 + cos(π·t/T))`, clamped at the end of the schedule.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

fn zeros_like(tensors: &[&Array2<f64>]) -> Vec<Array2<f64>> {
    tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect()
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Array2<f64>>,
}

impl Sgd {
    pub fn new(params: &impl Parameters, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: zeros_like(&params.tensors()),
        }
    }

    /// `grads[i]` pairs with `tensors_mut()[i]`; `None` means no gradient.
    pub fn step(&mut self, params: &mut impl Parameters, grads: &[Option<Array2<f64>>], lr: f64) {
        for ((p, v), g) in params.tensors_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            let Some(g) = g else { continue };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g.scaled_add(self.weight_decay, p);
            }
            v.zip_mut_with(&g, |vi, &gi| *vi = self.momentum * *vi + gi);
            p.scaled_add(-lr, v);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: Vec<u64>,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &impl Parameters, weight_decay: f64) -> Self {
        let tensors = params.tensors();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: vec![0; tensors.len()],
            m: zeros_like(&tensors),
            v: zeros_like(&tensors),
        }
    }

    /// Tensors without a gradient keep their moments and step count.
    pub fn step(&mut self, params: &mut impl Parameters, grads: &[Option<Array2<f64>>], lr: f64) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, (p, g)) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g.scaled_add(self.weight_decay, p);
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            self.m[i].zip_mut_with(&g, |m, &gi| *m = b1 * *m + (1.0 - b1) * gi);
            self.v[i].zip_mut_with(&g, |v, &gi| *v = b2 * *v + (1.0 - b2) * gi * gi);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            ndarray::Zip::from(p).and(&self.m[i]).and(&self.v[i]).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
