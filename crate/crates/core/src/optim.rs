//! Momentum SGD for the generator, Adam for the discriminators.
//!
//! Both follow the usual PyTorch update rules, so that hyperparameters
//! carry over unchanged.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type Grads = BTreeMap<String, Tensor>;

/// `lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: u64, max_iter: u64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if iter > max_iter {
        return Err(Error::invalid(format!(
            "iteration {iter} is past max_iter {max_iter}"
        )));
    }
    if iter == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

fn check_grads(params: &ParamStore, grads: &Grads) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!("gradient shape mismatch for `{name}`")));
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v ← μv + (g + λp)`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(p.data())
                .map(|(g, p)| g + self.weight_decay * p)
                .collect();
            let v = match self.velocity.get_mut(name) {
                Some(v) => {
                    for (vi, di) in v.data_mut().iter_mut().zip(&d) {
                        *vi = self.momentum * *vi + di;
                    }
                    v
                }
                None => self
                    .velocity
                    .entry(name.clone())
                    .or_insert(Tensor::new(g.shape(), d)?),
            };
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
