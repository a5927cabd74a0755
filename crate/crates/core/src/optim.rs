//! First-order optimizers over a [`ParamSet`] and the poly schedule.

use cellsearch_tensor::ParamSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, set: &mut ParamSet, lr: f64) {
        self.step_grouped(set, |_| lr)
    }

    /// One update with a learning rate chosen per parameter group.
    pub fn step_grouped(&mut self, set: &mut ParamSet, lr: impl Fn(u8) -> f64) {
        if self.m.len() != set.len() {
            self.m = set.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in set.iter_mut().enumerate() {
            let rate = lr(p.group);
            let (vals, grad) = p.value_and_grad_mut();
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..vals.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                vals[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Heavy-ball SGD: `v = mu * v + g`, `p -= lr * v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&[f64]> {
        self.velocity.get(index).map(Vec::as_slice)
    }

    pub fn step(&mut self, set: &mut ParamSet, lr: f64) {
        self.step_grouped(set, |_| lr)
    }

    pub fn step_grouped(&mut self, set: &mut ParamSet, lr: impl Fn(u8) -> f64) {
        if self.velocity.len() != set.len() {
            self.velocity = set.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (k, p) in set.iter_mut().enumerate() {
            let rate = lr(p.group);
            let (vals, grad) = p.value_and_grad_mut();
            let Some(grad) = grad else { continue };
            let vel = &mut self.velocity[k];
            for i in 0..vals.len() {
                vel[i] = self.momentum * vel[i] + grad[i];
                vals[i] -= rate * vel[i];
            }
        }
    }
}

/// Either optimizer behind one interface, for configs that pick at runtime.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(SgdMomentum),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new()),
            OptimizerKind::SgdMomentum => Optimizer::Sgd(SgdMomentum::new(momentum)),
        }
    }

    pub fn step_grouped(&mut self, set: &mut ParamSet, lr: impl Fn(u8) -> f64) {
        match self {
            Optimizer::Adam(o) => o.step_grouped(set, lr),
            Optimizer::Sgd(o) => o.step_grouped(set, lr),
        }
    }
}

/// `base * (1 - iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::Config(format!(
            "poly schedule at iteration {iter} of {max_iter}"
        )));
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}
