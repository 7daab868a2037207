//! SGD with momentum, Adam, and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{contract, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(contract("cosine schedule over zero epochs"));
    }
    if epoch > total {
        return Err(contract(format!("epoch {epoch} beyond schedule length {total}")));
    }
    let t = epoch as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

fn check_finite<F: Real>(store: &ParamStore<F>, ids: &[ParamId]) -> Result<()> {
    for &id in ids {
        let t = store.get(id);
        let g = t
            .grad()
            .ok_or_else(|| contract(format!("parameter `{}` has no gradient slot", store.name(id))))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: store.name(id).to_string(),
            });
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `d = g + wd * p; buf = momentum * buf + d; p -= lr * buf`.
/// The first step initialises `buf = d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub buffers: BTreeMap<ParamId, Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            step_count: 0,
            buffers: BTreeMap::new(),
        }
    }

    /// Updates `ids` in place. Gradients are left untouched; a non-finite
    /// gradient anywhere aborts the whole step before any parameter moves.
    pub fn step(&mut self, store: &mut ParamStore<F>, ids: &[ParamId], lr: f64) -> Result<()> {
        check_finite(store, ids)?;
        let (lr, mom, wd) = (F::of(lr), F::of(self.momentum), F::of(self.weight_decay));
        for &id in ids {
            let (data, grad) = store.get_mut(id).data_and_grad_mut();
            let grad = grad.expect("checked above");
            let buf = self.buffers.entry(id);
            let fresh = matches!(buf, std::collections::btree_map::Entry::Vacant(_));
            let buf = buf.or_insert_with(|| vec![F::zero(); data.len()]);
            for ((p, &g), b) in data.iter_mut().zip(grad.iter()).zip(buf.iter_mut()) {
                let d = g + wd * *p;
                *b = if fresh { d } else { mom * *b + d };
                *p -= lr * *b;
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Adam with bias correction and L2 weight decay added to the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub moments: BTreeMap<ParamId, (Vec<F>, Vec<F>)>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, ids: &[ParamId]) -> Result<()> {
        check_finite(store, ids)?;
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (wd, eps, lr) = (F::of(self.weight_decay), F::of(self.eps), F::of(self.lr));
        let (bc1, bc2) = (F::of(bc1), F::of(bc2));
        for &id in ids {
            let (data, grad) = store.get_mut(id).data_and_grad_mut();
            let grad = grad.expect("checked above");
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![F::zero(); data.len()], vec![F::zero(); data.len()]));
            for i in 0..data.len() {
                let g = grad[i] + wd * data[i];
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step_count += 1;
        Ok(())
    }
}
